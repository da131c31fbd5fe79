"""Gradient-check machinery shared by the op, model, and acceptance tests."""

import math
from typing import Callable, NamedTuple

import numpy as np

from ulite.rng import Rng
from ulite.tensor import Param, Tensor

# Pinned finite-difference tolerances. float32: step 1e-3, pass when
# |a - n| < 1e-2 * max(|a|, |n|) + 1e-4. float64 exists for tighter checks:
# step 1e-6, rel 1e-5, atol 1e-8.
FD_SETTINGS = {
    np.dtype(np.float32): (1e-3, 1e-2, 1e-4),
    np.dtype(np.float64): (1e-6, 1e-5, 1e-8),
}


class Slot(NamedTuple):
    name: str
    value: np.ndarray            # perturbed in place by the FD probe
    grad: Callable[[], np.ndarray]
    clear: Callable[[], None]


def param_slot(name: str, p: Param) -> Slot:
    return Slot(name, p.value, lambda: p.grad, p.zero_grad)


def tensor_slot(name: str, t: Tensor) -> Slot:
    return Slot(name, t.data, lambda: t.grad, t.zero_grad)


def gradcheck(make_out: Callable[[], Tensor], slots: list[Slot],
              weights: np.ndarray | None = None, trials: int = 20,
              seed: int = 0,
              skip: Callable[[Slot, int, float], bool] | None = None,
              h: float | None = None) -> int:
    """Central finite differences vs autodiff on randomly sampled entries.

    make_out rebuilds the graph from the slots' current array contents. The
    scalar under test is sum(make_out() * weights); analytic gradients come
    from backward seeded with the weights, the FD side evaluates the dot in
    float64 so the comparison measures the op's arithmetic and not the
    quantization of a float32 reduction. `skip` may veto a (slot, flat
    index, h) probe, e.g. near an argmax tie where FD is meaningless.
    `h` overrides the default step: deep graphs with large reduction scalars
    need a bigger step to keep the rounding-noise floor (~ulp_sum / 2h)
    under atol. Returns the number of comparisons made and asserts they all
    pass.
    """
    for slot in slots:
        slot.clear()
    out = make_out()
    if weights is None:
        weights = np.ones(out.data.shape, out.data.dtype)
    seed_grad = np.asarray(weights, dtype=out.data.dtype)
    out.backward(seed_grad)
    analytic = {slot.name: np.array(slot.grad(), copy=True) for slot in slots}
    default_h, rel, atol = FD_SETTINGS[out.data.dtype]
    h = default_h if h is None else h
    w64 = seed_grad.astype(np.float64)

    def scalar() -> float:
        return float(np.sum(make_out().data.astype(np.float64) * w64))

    rng = Rng(seed)
    failures = []
    compared = 0
    attempts = 0
    while compared < trials and attempts < trials * 20:
        attempts += 1
        slot = slots[rng.index(len(slots))]
        flat = slot.value.reshape(-1)
        idx = rng.index(flat.size)
        if skip is not None and skip(slot, idx, h):
            continue
        original = flat[idx]
        flat[idx] = original + h
        hi = scalar()
        flat[idx] = original - h
        lo = scalar()
        flat[idx] = original
        fd = (hi - lo) / (2.0 * h)
        a = float(analytic[slot.name].reshape(-1)[idx])
        if abs(a - fd) >= rel * max(abs(a), abs(fd)) + atol:
            failures.append((slot.name, idx, a, fd))
        compared += 1
    assert compared == trials, f"only {compared}/{trials} probes were usable"
    assert not failures, f"gradient mismatches (analytic vs FD): {failures}"
    return compared


def make_weights(dims, seed: int, dtype) -> np.ndarray:
    """Fixed random weights separating per-element gradients in gradchecks."""
    return Rng(seed).normal(int(np.prod(dims))).reshape(dims).astype(dtype)


def random_tensor(dims, seed: int, dtype=np.float32, requires_grad: bool = True,
                  std: float = 1.0) -> Tensor:
    data = Rng(seed).normal(int(np.prod(dims)), std=std).reshape(dims).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def random_binary(dims, seed: int, dtype=np.float32) -> np.ndarray:
    return (Rng(seed).uniform(int(np.prod(dims))).reshape(dims) < 0.5).astype(dtype)


def scalar_adam_trace(w0: float, grads: list[float], lr: float = 1e-3,
                      beta1: float = 0.9, beta2: float = 0.999,
                      eps: float = 1e-8) -> list[float]:
    """Float64 single-weight Adam reference, eps outside the sqrt."""
    m = v = 0.0
    w = float(w0)
    trace = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(w)
    return trace
