"""Encoder/decoder segmentation network built from depthwise stage blocks.

The network is a U-shaped hierarchy over six channel widths. A stem block
runs at full resolution, five encoder blocks each follow a 2x2 max-pool
(so the deepest feature sits at 1/32 scale), a dilated bottleneck mixes that
feature, and five decoder blocks each upsample, concatenate the matching
encoder skip, and reduce channels back up the ladder. A 1x1 head plus
sigmoid produces a single-channel soft mask at input resolution.

Stage blocks come in two flavors selected by config:

- axial: x + dw_1xn(x) + dw_nx1(x), then BN -> 1x1 conv -> GELU
- square: x + dw_nxn(x), then the same tail

The bottleneck first scales channels down with a 1x1 conv, then adds three
axial pairs with kernel 3 and dilations 1, 2, 3 on top of the residual
(a single axial n=7 pair when the dilated trio is disabled), then BN ->
1x1 conv -> GELU.

Parameter creation order (and therefore the init RNG stream) is fixed:
stem, enc1..enc5, bottleneck, dec5..dec1, head; within a block the
convolutions are created in forward order.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .ops import (BatchNorm, DepthwiseConv, PointwiseConv, batch_norm,
                  depthwise_conv, gelu, max_pool2, pointwise_conv, sigmoid,
                  upsample2)
from .rng import Rng
from .tensor import Tensor

_VARIANTS = ("axial", "square")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128, 256, 512)
    n: int = 7
    dw_variant: str = "axial"
    addc: bool = True
    bottleneck_width: int = 256
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if len(self.widths) != 6 or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"widths must be 6 positive integers, got {self.widths}")
        if self.n < 1 or self.n % 2 == 0:
            raise ConfigError(f"n must be a positive odd integer, got {self.n}")
        if self.dw_variant not in _VARIANTS:
            raise ConfigError(f"dw_variant must be one of {_VARIANTS}, got {self.dw_variant!r}")
        if self.bottleneck_width < 1:
            raise ConfigError(f"bottleneck_width must be >= 1, got {self.bottleneck_width}")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")
        return self


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def parse_config_text(text: str) -> ModelConfig:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            if key == "widths":
                values[key] = tuple(int(part.strip()) for part in value.split(","))
            elif key in ("n", "bottleneck_width", "seed"):
                values[key] = int(value)
            elif key == "dw_variant":
                values[key] = value
            elif key == "addc":
                if value.lower() not in _BOOL_WORDS:
                    raise ValueError(value)
                values[key] = _BOOL_WORDS[value.lower()]
            else:
                raise ConfigError(f"unknown key {key!r}", line=lineno)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}", line=lineno) from None
    return ModelConfig(**values).validate()


def parse_config_file(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def list_variants() -> list[ModelConfig]:
    """The ablation grid: {axial, square} x n in {3,5,7} x dilated trio on/off."""
    grid = []
    base = ModelConfig()
    for variant in _VARIANTS:
        for n in (3, 5, 7):
            for addc in (True, False):
                grid.append(replace(base, dw_variant=variant, n=n, addc=addc))
    return grid


# ---------------------------------------------------------------------------
# stage blocks
# ---------------------------------------------------------------------------


class AxialDWBlock:
    """Residual axial strip convolutions, then BN -> 1x1 conv -> GELU."""

    def __init__(self, dw_h: DepthwiseConv, dw_v: DepthwiseConv,
                 bn: BatchNorm, pw: PointwiseConv):
        self.dw_h = dw_h
        self.dw_v = dw_v
        self.bn = bn
        self.pw = pw

    @classmethod
    def create(cls, c_in: int, c_out: int, n: int, rng: Rng, dtype=np.float32):
        return cls(DepthwiseConv.create(c_in, (1, n), rng, dtype=dtype),
                   DepthwiseConv.create(c_in, (n, 1), rng, dtype=dtype),
                   BatchNorm.create(c_in, dtype=dtype),
                   PointwiseConv.create(c_in, c_out, rng, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        mixed = T.add(T.add(x, depthwise_conv(x, self.dw_h)),
                      depthwise_conv(x, self.dw_v))
        return gelu(pointwise_conv(batch_norm(mixed, self.bn), self.pw))

    __call__ = forward

    def param_count(self) -> int:
        return (self.dw_h.param_count() + self.dw_v.param_count()
                + self.bn.param_count() + self.pw.param_count())

    def named_params(self, prefix: str = ""):
        yield from self.dw_h.named_params(prefix + "dw_h.")
        yield from self.dw_v.named_params(prefix + "dw_v.")
        yield from self.bn.named_params(prefix + "bn.")
        yield from self.pw.named_params(prefix + "pw.")

    def named_buffers(self, prefix: str = ""):
        yield from self.bn.named_buffers(prefix + "bn.")

    def set_mode(self, mode: str) -> None:
        self.bn.mode = mode


class SquareDWBlock:
    """Residual square depthwise convolution with the same BN/1x1/GELU tail."""

    def __init__(self, dw: DepthwiseConv, bn: BatchNorm, pw: PointwiseConv):
        self.dw = dw
        self.bn = bn
        self.pw = pw

    @classmethod
    def create(cls, c_in: int, c_out: int, n: int, rng: Rng, dtype=np.float32):
        return cls(DepthwiseConv.create(c_in, (n, n), rng, dtype=dtype),
                   BatchNorm.create(c_in, dtype=dtype),
                   PointwiseConv.create(c_in, c_out, rng, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        mixed = T.add(x, depthwise_conv(x, self.dw))
        return gelu(pointwise_conv(batch_norm(mixed, self.bn), self.pw))

    __call__ = forward

    def param_count(self) -> int:
        return self.dw.param_count() + self.bn.param_count() + self.pw.param_count()

    def named_params(self, prefix: str = ""):
        yield from self.dw.named_params(prefix + "dw.")
        yield from self.bn.named_params(prefix + "bn.")
        yield from self.pw.named_params(prefix + "pw.")

    def named_buffers(self, prefix: str = ""):
        yield from self.bn.named_buffers(prefix + "bn.")

    def set_mode(self, mode: str) -> None:
        self.bn.mode = mode


def make_stage(c_in: int, c_out: int, config: ModelConfig, rng: Rng, dtype=np.float32):
    if config.dw_variant == "axial":
        return AxialDWBlock.create(c_in, c_out, config.n, rng, dtype=dtype)
    return SquareDWBlock.create(c_in, c_out, config.n, rng, dtype=dtype)


class Bottleneck:
    """Channel-scaled residual block with parallel axial pairs.

    With the dilated trio enabled the branches are kernel-3 axial pairs at
    dilations 1, 2, 3; disabled, a single axial n=7 pair at dilation 1.
    All branches read the same channel-scaled input r, and their outputs are
    summed onto r before the BN -> 1x1 conv -> GELU tail.
    """

    def __init__(self, pw_in: PointwiseConv,
                 branches: list[tuple[str, DepthwiseConv, DepthwiseConv]],
                 bn: BatchNorm, pw_out: PointwiseConv):
        self.pw_in = pw_in
        self.branches = branches
        self.bn = bn
        self.pw_out = pw_out

    @classmethod
    def create(cls, c_in: int, width: int, addc: bool, n: int, rng: Rng,
               dtype=np.float32):
        pw_in = PointwiseConv.create(c_in, width, rng, dtype=dtype)
        branches = []
        if addc:
            for d in (1, 2, 3):
                dw_h = DepthwiseConv.create(width, (1, 3), rng, dilation=d, dtype=dtype)
                dw_v = DepthwiseConv.create(width, (3, 1), rng, dilation=d, dtype=dtype)
                branches.append((f"branch_d{d}", dw_h, dw_v))
        else:
            dw_h = DepthwiseConv.create(width, (1, n), rng, dtype=dtype)
            dw_v = DepthwiseConv.create(width, (n, 1), rng, dtype=dtype)
            branches.append(("branch", dw_h, dw_v))
        bn = BatchNorm.create(width, dtype=dtype)
        pw_out = PointwiseConv.create(width, width, rng, dtype=dtype)
        return cls(pw_in, branches, bn, pw_out)

    def forward(self, x: Tensor) -> Tensor:
        r = pointwise_conv(x, self.pw_in)
        mixed = r
        for _, dw_h, dw_v in self.branches:
            mixed = T.add(mixed, depthwise_conv(r, dw_h))
            mixed = T.add(mixed, depthwise_conv(r, dw_v))
        return gelu(pointwise_conv(batch_norm(mixed, self.bn), self.pw_out))

    __call__ = forward

    def param_count(self) -> int:
        total = self.pw_in.param_count() + self.bn.param_count() + self.pw_out.param_count()
        for _, dw_h, dw_v in self.branches:
            total += dw_h.param_count() + dw_v.param_count()
        return total

    def named_params(self, prefix: str = ""):
        yield from self.pw_in.named_params(prefix + "pw_in.")
        for tag, dw_h, dw_v in self.branches:
            yield from dw_h.named_params(f"{prefix}{tag}.dw_h.")
            yield from dw_v.named_params(f"{prefix}{tag}.dw_v.")
        yield from self.bn.named_params(prefix + "bn.")
        yield from self.pw_out.named_params(prefix + "pw_out.")

    def named_buffers(self, prefix: str = ""):
        yield from self.bn.named_buffers(prefix + "bn.")

    def set_mode(self, mode: str) -> None:
        self.bn.mode = mode


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

IN_CHANNELS = 3
SPATIAL_MULTIPLE = 64


class ULiteModel:
    def __init__(self, config: ModelConfig, stem, encoders, bottleneck, decoders,
                 head: PointwiseConv):
        self.config = config
        self.stem = stem
        self.encoders = encoders
        self.bottleneck = bottleneck
        self.decoders = decoders
        self.head = head
        self.mode = "train"

    @classmethod
    def build(cls, config: ModelConfig, dtype=np.float32) -> "ULiteModel":
        config.validate()
        rng = Rng(config.seed)
        widths = tuple(int(w) for w in config.widths)
        stem = make_stage(IN_CHANNELS, widths[0], config, rng, dtype=dtype)
        encoders = [make_stage(widths[i - 1], widths[i], config, rng, dtype=dtype)
                    for i in range(1, 6)]
        bottleneck = Bottleneck.create(widths[5], config.bottleneck_width,
                                       config.addc, config.n, rng, dtype=dtype)
        decoders = [make_stage(config.bottleneck_width + widths[4], widths[4],
                               config, rng, dtype=dtype)]
        for i in range(4, 0, -1):
            decoders.append(make_stage(widths[i] + widths[i - 1], widths[i - 1],
                                       config, rng, dtype=dtype))
        head = PointwiseConv.create(widths[0], 1, rng, dtype=dtype)
        return cls(config, stem, encoders, bottleneck, decoders, head)

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        n, c, h, w = x.data.shape
        if c != IN_CHANNELS:
            raise ShapeError(f"expected {IN_CHANNELS} input channels, got {c}")
        if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
            raise ShapeError(
                f"input H and W must be divisible by {SPATIAL_MULTIPLE}, got ({h}, {w})")

    def features(self, x: Tensor) -> list[Tensor]:
        """Encoder ladder: outputs at scales 1, 1/2, ..., 1/32."""
        self._check_input(x)
        with T.op_scope("stem"):
            cur = self.stem(x)
        feats = [cur]
        for i, enc in enumerate(self.encoders, start=1):
            with T.op_scope(f"enc{i}"):
                cur = enc(max_pool2(cur))
            feats.append(cur)
        return feats

    def decode(self, bottom: Tensor, feats: list[Tensor]) -> Tensor:
        """Decoder ladder from the bottleneck output and encoder skips."""
        cur = bottom
        for step, dec in enumerate(self.decoders):
            level = 5 - step
            with T.op_scope(f"dec{level}"):
                cur = dec(T.concat_channels(upsample2(cur), feats[level - 1]))
        with T.op_scope("head"):
            return sigmoid(pointwise_conv(cur, self.head))

    def forward(self, x: Tensor) -> Tensor:
        feats = self.features(x)
        with T.op_scope("bottleneck"):
            bottom = self.bottleneck(feats[5])
        return self.decode(bottom, feats)

    __call__ = forward

    # -- parameter plumbing ---------------------------------------------------

    def _blocks(self):
        yield "stem.", self.stem
        for i, enc in enumerate(self.encoders, start=1):
            yield f"enc{i}.", enc
        yield "bottleneck.", self.bottleneck
        for step, dec in enumerate(self.decoders):
            yield f"dec{5 - step}.", dec

    def named_params(self):
        for prefix, block in self._blocks():
            yield from block.named_params(prefix)
        yield from self.head.named_params("head.")

    def named_buffers(self):
        for prefix, block in self._blocks():
            yield from block.named_buffers(prefix)

    def parameters(self) -> list:
        return [p for _, p in self.named_params()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        for _, block in self._blocks():
            block.set_mode(mode)

    def param_count(self) -> int:
        total = sum(block.param_count() for _, block in self._blocks())
        return total + self.head.param_count()


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamReport:
    rows: list[tuple[str, tuple[int, ...], int]]
    total: int
    buffer_rows: list[tuple[str, tuple[int, ...], int]] = field(default_factory=list)
    buffer_total: int = 0

    def format_table(self) -> str:
        name_w = max((len(name) for name, _, _ in self.rows), default=4)
        lines = [f"{'name':<{name_w}}  {'dims':<16} count"]
        for name, dims, count in self.rows:
            lines.append(f"{name:<{name_w}}  {str(dims):<16} {count}")
        lines.append(f"{'total':<{name_w}}  {'':<16} {self.total}")
        lines.append(f"buffers (running stats, not learnable): {self.buffer_total}")
        return "\n".join(lines)


def count_params(model_or_config) -> ParamReport:
    """Exact learnable-parameter audit by walking every Param once.

    Accepts a built model or a config (which is built first). Raises if a
    parameter object appears under two names, so the walk is a true union.
    """
    model = model_or_config
    if isinstance(model_or_config, ModelConfig):
        model = ULiteModel.build(model_or_config)
    rows = []
    seen: set[int] = set()
    total = 0
    for name, param in model.named_params():
        if id(param) in seen:
            raise ValueError(f"parameter {name!r} is aliased under two names")
        seen.add(id(param))
        count = param.numel()
        rows.append((name, tuple(param.value.shape), count))
        total += count
    buffer_rows = []
    buffer_total = 0
    for name, buf in model.named_buffers():
        if id(buf) in seen:
            raise ValueError(f"buffer {name!r} aliases a parameter")
        seen.add(id(buf))
        buffer_rows.append((name, tuple(buf.shape), int(buf.size)))
        buffer_total += int(buf.size)
    return ParamReport(rows, total, buffer_rows, buffer_total)


# ---------------------------------------------------------------------------
# influence footprints
# ---------------------------------------------------------------------------


def gradient_footprint(fn, channels: int, size: int, seed: int = 0) -> np.ndarray:
    """Boolean (size, size) map of input pixels that influence the center output.

    Backpropagates a one-hot gradient planted at the center output pixel of
    fn(x) through to the input and marks pixels with any nonzero channel
    gradient. fn must preserve spatial dims. Run BN-bearing modules in eval
    mode: train-mode batch statistics couple every pixel and would mark the
    whole plane.
    """
    x = T.rand_normal((1, channels, size, size), Rng(seed), requires_grad=True)
    y = fn(x)
    if y.data.shape[2:] != (size, size):
        raise ShapeError(f"footprint fn changed spatial dims to {y.data.shape[2:]}")
    pick = np.zeros_like(y.data)
    pick[:, :, size // 2, size // 2] = 1.0
    y.backward(pick)
    if x.grad is None:
        return np.zeros((size, size), dtype=bool)
    return np.any(x.grad != 0.0, axis=(0, 1))


def render_footprint(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if v else "." for v in row) for row in mask)


def expected_axial_footprint(size: int, n: int, dilation: int = 1) -> np.ndarray:
    """Cross of half-width dilation*(n-1)/2 centered in a size x size map."""
    arm = dilation * (n - 1) // 2
    mask = np.zeros((size, size), dtype=bool)
    c = size // 2
    mask[c, max(0, c - arm):c + arm + 1] = True
    mask[max(0, c - arm):c + arm + 1, c] = True
    return mask


def expected_square_footprint(size: int, n: int, dilation: int = 1) -> np.ndarray:
    arm = dilation * (n - 1) // 2
    mask = np.zeros((size, size), dtype=bool)
    c = size // 2
    mask[max(0, c - arm):c + arm + 1, max(0, c - arm):c + arm + 1] = True
    return mask


def expected_dilated_cross_footprint(size: int, n: int, dilation: int) -> np.ndarray:
    """Cross touching only multiples of `dilation` out to dilation*(n-1)/2."""
    mask = np.zeros((size, size), dtype=bool)
    c = size // 2
    half = (n - 1) // 2
    for step in range(-half, half + 1):
        offset = c + step * dilation
        if 0 <= offset < size:
            mask[c, offset] = True
            mask[offset, c] = True
    return mask


__all__ = [
    "AxialDWBlock", "Bottleneck", "IN_CHANNELS", "ModelConfig", "ParamReport",
    "SPATIAL_MULTIPLE", "SquareDWBlock", "ULiteModel", "count_params",
    "expected_axial_footprint", "expected_dilated_cross_footprint",
    "expected_square_footprint", "gradient_footprint", "list_variants",
    "make_stage", "parse_config_file", "parse_config_text", "render_footprint",
]
