"""Self-contained binary checkpoints.

Layout (all integers little-endian):

    magic   10 bytes  b"ULITECKPT1"
    version u32       currently 1
    count   u32       number of tensor entries, including config entries
    entry*  count times:
        name_len u16, name UTF-8,
        rank u8, dims rank x u32,
        payload float32 row-major (prod(dims) * 4 bytes)

Entries appear in a fixed order: the six config.* tensors, learnable
parameters in model definition order, BN running-stat buffers, then optional
optimizer state (adam.t, adam.m.<param>, adam.v.<param>). The model config
is embedded (widths, kernel size, variant, dilated-trio flag, bottleneck
width, init seed), so loading needs no side channel. The 64-bit seed is
stored exactly as four 16-bit words since payloads are float32-only.

Writes go to a temp file in the target directory followed by os.replace, so
a checkpoint path never holds a partial file.
"""

import io
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ULiteModel

MAGIC = b"ULITECKPT1"
VERSION = 1

_VARIANT_CODE = {"axial": 0.0, "square": 1.0}
_CODE_VARIANT = {0: "axial", 1: "square"}


def _seed_words(seed: int) -> np.ndarray:
    return np.array([(seed >> (16 * k)) & 0xFFFF for k in range(4)], dtype=np.float32)


def _words_seed(words: np.ndarray) -> int:
    return sum(int(w) << (16 * k) for k, w in enumerate(words))


def _config_entries(config: ModelConfig) -> list[tuple[str, np.ndarray]]:
    return [
        ("config.widths", np.array(config.widths, dtype=np.float32)),
        ("config.n", np.array([config.n], dtype=np.float32)),
        ("config.dw_variant", np.array([_VARIANT_CODE[config.dw_variant]], dtype=np.float32)),
        ("config.addc", np.array([1.0 if config.addc else 0.0], dtype=np.float32)),
        ("config.bottleneck_width", np.array([config.bottleneck_width], dtype=np.float32)),
        ("config.seed", _seed_words(config.seed)),
    ]


def _config_from_entries(entries: dict) -> ModelConfig:
    needed = [name for name, _ in _config_entries(ModelConfig())]
    for name in needed:
        if name not in entries:
            raise CheckpointError(f"checkpoint missing {name}")
    code = int(entries["config.dw_variant"][0])
    if code not in _CODE_VARIANT:
        raise CheckpointError(f"unknown dw_variant code {code}")
    return ModelConfig(
        widths=tuple(int(w) for w in entries["config.widths"]),
        n=int(entries["config.n"][0]),
        dw_variant=_CODE_VARIANT[code],
        addc=bool(entries["config.addc"][0]),
        bottleneck_width=int(entries["config.bottleneck_width"][0]),
        seed=_words_seed(entries["config.seed"]),
    ).validate()


def checkpoint_entries(model, optimizer=None) -> list[tuple[str, np.ndarray]]:
    """The full ordered entry list a checkpoint of this model will contain."""
    entries = _config_entries(model.config)
    names = []
    for name, param in model.named_params():
        names.append(name)
        entries.append((name, param.value))
    for name, buf in model.named_buffers():
        entries.append((name, buf))
    if optimizer is not None:
        entries.append(("adam.t", np.array([optimizer.t], dtype=np.float32)))
        for name, m in zip(names, optimizer.m):
            entries.append(("adam.m." + name, m))
        for name, v in zip(names, optimizer.v):
            entries.append(("adam.v." + name, v))
    return entries


def save_checkpoint(model, path: str, optimizer=None) -> None:
    entries = checkpoint_entries(model, optimizer)
    blob = io.BytesIO()
    blob.write(MAGIC)
    blob.write(struct.pack("<I", VERSION))
    blob.write(struct.pack("<I", len(entries)))
    for name, array in entries:
        encoded = name.encode("utf-8")
        arr = np.asarray(array)
        blob.write(struct.pack("<H", len(encoded)))
        blob.write(encoded)
        blob.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            blob.write(struct.pack("<I", dim))
        blob.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = blob.getvalue()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        # mkstemp files are 0600; give the final checkpoint normal file bits
        os.chmod(tmp_path, 0o644)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated at byte {self.offset} reading {what} "
                f"(need {count}, have {len(self.data) - self.offset})")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


@dataclass
class AdamSnapshot:
    """Optimizer state recovered from a checkpoint, keyed by parameter name."""
    t: int
    m: dict
    v: dict


def load_checkpoint(path: str):
    """Rebuild (model, AdamSnapshot | None) from a checkpoint file.

    The model is constructed from the embedded config and then overwritten
    with the stored parameters and running stats, so the result does not
    depend on the init RNG. Raises CheckpointError with a specific message
    for bad magic, unsupported version, truncation, duplicate/unknown/missing
    tensors, and dimension mismatches.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    reader = _Reader(data, path)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    count = reader.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for index in range(count):
        name_len = reader.u16(f"entry {index} name length")
        name = reader.take(name_len, f"entry {index} name").decode("utf-8")
        rank = reader.u8(f"{name} rank")
        dims = tuple(reader.u32(f"{name} dim {d}") for d in range(rank))
        size = 1
        for dim in dims:
            if dim < 1:
                raise CheckpointError(f"{path}: {name} has invalid dim {dim}")
            size *= dim
        payload = reader.take(4 * size, f"{name} payload")
        if name in entries:
            raise CheckpointError(f"{path}: duplicate tensor {name}")
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if reader.offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.offset} trailing bytes "
                              f"after {count} entries")

    config = _config_from_entries(entries)
    for name, _ in _config_entries(config):
        entries.pop(name)
    model = ULiteModel.build(config)
    param_names = []
    for name, param in model.named_params():
        param_names.append(name)
        _assign(entries, name, param.value, path)
    for name, buf in model.named_buffers():
        _assign(entries, name, buf, path)

    snapshot = None
    if "adam.t" in entries:
        t = int(entries.pop("adam.t")[0])
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for name in param_names:
            m[name] = _take(entries, "adam.m." + name, path)
            v[name] = _take(entries, "adam.v." + name, path)
        snapshot = AdamSnapshot(t, m, v)
    if entries:
        raise CheckpointError(f"{path}: unexpected tensor {sorted(entries)[0]!r}")
    return model, snapshot


def _take(entries: dict, name: str, path: str) -> np.ndarray:
    if name not in entries:
        raise CheckpointError(f"{path}: missing tensor {name}")
    return entries.pop(name)


def _assign(entries: dict, name: str, target: np.ndarray, path: str) -> None:
    arr = _take(entries, name, path)
    if arr.shape != target.shape:
        raise CheckpointError(f"{path}: dims mismatch for {name}: file {arr.shape} "
                              f"vs model {target.shape}")
    target[...] = arr.astype(target.dtype)


def restore_optimizer(optimizer, model, snapshot: AdamSnapshot) -> None:
    """Load snapshot state into an Adam instance built over model.parameters()."""
    names = [name for name, _ in model.named_params()]
    if len(names) != len(optimizer.params):
        raise CheckpointError("optimizer/model parameter count mismatch")
    optimizer.t = snapshot.t
    for i, name in enumerate(names):
        optimizer.m[i][...] = snapshot.m[name]
        optimizer.v[i][...] = snapshot.v[name]
