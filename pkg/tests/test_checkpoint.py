"""Checkpoint format: round-trips, corruption handling, byte layout."""

import struct

import numpy as np
import pytest

from helpers import random_tensor
from ulite.checkpoint import (MAGIC, VERSION, AdamSnapshot, checkpoint_entries,
                              load_checkpoint, restore_optimizer,
                              save_checkpoint)
from ulite.errors import CheckpointError
from ulite.model import ModelConfig, ULiteModel
from ulite.train import Adam

SMALL = ModelConfig(widths=(2, 3, 4, 5, 6, 7), bottleneck_width=4,
                    seed=0xDEADBEEF12345678)


def _trained_ish_model():
    """A model whose params and running stats differ from a fresh build."""
    model = ULiteModel.build(SMALL)
    x = random_tensor((2, 3, 64, 64), seed=1, requires_grad=False)
    model(x)          # train-mode forward shifts the BN running stats
    for i, (_, p) in enumerate(model.named_params()):
        p.value += np.float32(0.001) * np.float32(i % 7)
    return model


class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = _trained_ish_model()
        first = tmp_path / "a.ckpt"
        save_checkpoint(model, str(first))
        loaded, snapshot = load_checkpoint(str(first))
        assert snapshot is None
        second = tmp_path / "b.ckpt"
        save_checkpoint(loaded, str(second))
        assert first.read_bytes() == second.read_bytes()

    def test_double_save_is_byte_identical(self, tmp_path):
        model = _trained_ish_model()
        save_checkpoint(model, str(tmp_path / "a.ckpt"))
        save_checkpoint(model, str(tmp_path / "b.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loaded_model_reproduces_forward_bitwise(self, tmp_path):
        model = _trained_ish_model()
        model.set_mode("eval")
        x = random_tensor((1, 3, 64, 64), seed=2, requires_grad=False)
        expected = model(x).data
        save_checkpoint(model, str(tmp_path / "m.ckpt"))
        loaded, _ = load_checkpoint(str(tmp_path / "m.ckpt"))
        loaded.set_mode("eval")
        assert np.array_equal(loaded(x).data, expected)

    def test_config_survives_including_64bit_seed(self, tmp_path):
        config = ModelConfig(widths=(4, 8, 12, 16, 20, 24), n=5,
                             dw_variant="square", addc=False,
                             bottleneck_width=10, seed=0xFEDCBA9876543210)
        save_checkpoint(ULiteModel.build(config), str(tmp_path / "c.ckpt"))
        loaded, _ = load_checkpoint(str(tmp_path / "c.ckpt"))
        assert loaded.config == config

    def test_optimizer_state_round_trip(self, tmp_path):
        model = _trained_ish_model()
        optimizer = Adam(model.parameters(), lr=1e-3)
        x = random_tensor((1, 3, 64, 64), seed=3, requires_grad=False)
        for _ in range(3):
            model.zero_grad()
            model(x).backward()
            optimizer.step()
        save_checkpoint(model, str(tmp_path / "o.ckpt"), optimizer)
        loaded, snapshot = load_checkpoint(str(tmp_path / "o.ckpt"))
        assert isinstance(snapshot, AdamSnapshot) and snapshot.t == 3
        resumed = Adam(loaded.parameters(), lr=1e-3)
        restore_optimizer(resumed, loaded, snapshot)
        assert resumed.t == optimizer.t
        for a, b in zip(optimizer.m, resumed.m):
            assert np.array_equal(a, b)
        for a, b in zip(optimizer.v, resumed.v):
            assert np.array_equal(a, b)

    def test_atomic_write_replaces_existing(self, tmp_path):
        target = tmp_path / "same.ckpt"
        target.write_bytes(b"junk from a previous run")
        model = ULiteModel.build(SMALL)
        save_checkpoint(model, str(target))
        loaded, _ = load_checkpoint(str(target))
        assert loaded.config == SMALL
        assert not list(tmp_path.glob(".ckpt-*"))   # no temp litter


class TestByteLayout:
    def test_file_size_matches_entry_arithmetic(self, tmp_path):
        model = _trained_ish_model()
        optimizer = Adam(model.parameters())
        path = tmp_path / "sized.ckpt"
        save_checkpoint(model, str(path), optimizer)
        entries = checkpoint_entries(model, optimizer)
        expected = len(MAGIC) + 4 + 4
        for name, array in entries:
            arr = np.asarray(array)
            expected += 2 + len(name.encode()) + 1 + 4 * arr.ndim + 4 * arr.size
        assert path.stat().st_size == expected

    def test_header_fields(self, tmp_path):
        path = tmp_path / "h.ckpt"
        save_checkpoint(ULiteModel.build(SMALL), str(path))
        blob = path.read_bytes()
        assert blob[:len(MAGIC)] == MAGIC
        version, count = struct.unpack_from("<II", blob, len(MAGIC))
        assert version == VERSION
        assert count == len(checkpoint_entries(ULiteModel.build(SMALL)))

    def test_entry_order_starts_with_config(self, tmp_path):
        names = [name for name, _ in checkpoint_entries(ULiteModel.build(SMALL))]
        assert names[:6] == ["config.widths", "config.n", "config.dw_variant",
                             "config.addc", "config.bottleneck_width",
                             "config.seed"]
        assert names[6].startswith("stem.")


class TestCorruption:
    @pytest.fixture
    def valid(self, tmp_path):
        path = tmp_path / "v.ckpt"
        save_checkpoint(ULiteModel.build(SMALL), str(path))
        return path

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(str(tmp_path / "absent.ckpt"))

    def test_bad_magic(self, valid):
        blob = bytearray(valid.read_bytes())
        blob[:4] = b"XXXX"
        valid.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(str(valid))

    def test_unsupported_version(self, valid):
        blob = bytearray(valid.read_bytes())
        struct.pack_into("<I", blob, len(MAGIC), 99)
        valid.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(str(valid))

    @pytest.mark.parametrize("keep", [5, 17, 50, 0.5])
    def test_truncation_at_any_depth(self, valid, keep):
        blob = valid.read_bytes()
        cut = int(len(blob) * keep) if isinstance(keep, float) else keep
        valid.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(str(valid))

    def test_trailing_garbage(self, valid):
        valid.write_bytes(valid.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(str(valid))

    def test_unexpected_extra_tensor(self, valid):
        blob = bytearray(valid.read_bytes())
        count, = struct.unpack_from("<I", blob, len(MAGIC) + 4)
        struct.pack_into("<I", blob, len(MAGIC) + 4, count + 1)
        name = b"stowaway"
        extra = (struct.pack("<H", len(name)) + name + struct.pack("<B", 1)
                 + struct.pack("<I", 1) + struct.pack("<f", 0.0))
        valid.write_bytes(bytes(blob) + extra)
        with pytest.raises(CheckpointError, match="stowaway"):
            load_checkpoint(str(valid))

    def test_dims_mismatch_against_model(self, valid, tmp_path):
        # rewrite config.n from 7 to 5: the rebuilt model expects narrower
        # kernels than the stored payloads
        blob = bytearray(valid.read_bytes())
        offset = len(MAGIC) + 8
        for _ in range(2):   # skip config.widths, land on config.n
            name_len, = struct.unpack_from("<H", blob, offset)
            offset += 2 + name_len
            rank = blob[offset]
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            payload_at = offset
            offset += 4 * int(np.prod(dims))
        struct.pack_into("<f", blob, payload_at, 5.0)
        valid.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="dims mismatch"):
            load_checkpoint(str(valid))
