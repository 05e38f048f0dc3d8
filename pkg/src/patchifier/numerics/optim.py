from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


@dataclass
class ParamGroup:
    """Named parameters plus AdamW moment buffers and the shared step count."""

    params: dict[str, Tensor]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ConfigError(f"moment buffers for {name} do not match parameter shape {p.shape}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], int]:
        return self.m, self.v, self.t

    def load_state(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            if name not in m or name not in v:
                raise ConfigError(f"optimizer state missing for parameter {name}")
            self.m[name] = np.array(m[name], dtype=np.float32)
            self.v[name] = np.array(v[name], dtype=np.float32)
        self.t = int(t)


def adamw_step(
    group: ParamGroup,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> ParamGroup:
    """One AdamW update, in place. Weight decay is decoupled from the moments."""
    for name, p in group.params.items():
        if p.grad is None:
            raise ConfigError(f"parameter {name!r} has no gradient")
    group.t += 1
    t = group.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in group.params.items():
        g = p.grad
        m, v = group.m[name], group.v[name]
        if weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return group
