"""Central finite-difference checking of reverse-mode gradients."""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, NamedTuple

import numpy as np

from ..errors import NumericError
from .tensor import Tensor, no_grad


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-3,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and is evaluated at float64.
    The relative error of each coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    With ``coords`` set, only that many randomly chosen coordinates are probed.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued f")
    y.backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad.astype(np.float64)

    def value(arr: np.ndarray) -> float:
        with no_grad():
            return float(f(Tensor(arr)).data)

    y0 = value(base.copy())
    if value(base.copy()) != y0 or y0 != float(y.data):
        raise NumericError("f is not deterministic; finite differences are meaningless")

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=coords, replace=False))
    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in idx:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        num = (value(plus.reshape(base.shape)) - value(minus.reshape(base.shape))) / (2 * h)
        a = a_flat[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


class GradCase(NamedTuple):
    label: str
    f: Callable[[Tensor], Tensor]
    x: np.ndarray
    h: float = 1e-3
    coords: int | None = None


# name -> factory(rng) yielding cases; populated by patchifier.gradsuite
REGISTRY: dict[str, Callable[[np.random.Generator], Iterable[GradCase]]] = {}


def register(name: str):
    def deco(factory):
        REGISTRY[name] = factory
        return factory

    return deco


def run_registry(names: Iterable[str] | None = None, seed: int = 0) -> dict[str, float]:
    """Worst relative error per registered check."""
    from .. import gradsuite  # noqa: F401  (importing registers the built-in checks)

    results = {}
    for name in names if names is not None else list(REGISTRY):
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for case in REGISTRY[name](rng):
            err = finite_difference_check(case.f, case.x, h=case.h, coords=case.coords, rng=rng)
            worst = max(worst, err)
        results[name] = worst
    return results
