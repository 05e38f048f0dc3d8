"""Feature extractor, transformer bottleneck, decoder, and downstream head.

All parameters live in flat ``name -> Tensor`` dicts with dotted, network-
prefixed names (``fe.down0.conv_a.weight``), which is also the checkpoint
naming.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ops
from .numerics.tensor import Tensor, parameter

PATCH_SHAPE = (1, 64, 32)


@dataclass(frozen=True)
class ModelConfig:
    fe_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    hidden: int = 256
    layers: int = 8
    heads: int = 4
    ffn: int = 1024
    max_seq_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        h, w = PATCH_SHAPE[1:]
        depth = len(self.fe_channels)
        if h % 2**depth or w % 2**depth:
            raise ConfigError(f"{depth} halvings do not divide the patch shape {PATCH_SHAPE}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        depth = len(self.fe_channels)
        return PATCH_SHAPE[1] >> depth, PATCH_SHAPE[2] >> depth

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        """Up-module widths: FE widths reversed (minus the top) then the first width again."""
        return tuple(reversed(self.fe_channels[:-1])) + (self.fe_channels[0],)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(fe_channels=(2, 2, 2, 2, 2), hidden=8, layers=2, heads=2, ffn=16, max_seq_len=8, dropout=0.0)
        base.update(kw)
        return cls(**base)


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _xavier_uniform(rng, d_out, d_in):
    lim = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_out, d_in))


class Network:
    """Flat named parameters plus non-trainable buffers (batchnorm statistics)."""

    prefix = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _conv(self, name, c_in, c_out, rng, k=3):
        self.params[f"{name}.weight"] = parameter(_he_normal(rng, (c_out, c_in, k, k), c_in * k * k))
        self.params[f"{name}.bias"] = parameter(np.zeros(c_out))

    def _bn(self, name, c):
        self.params[f"{name}.gamma"] = parameter(np.ones(c))
        self.params[f"{name}.beta"] = parameter(np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, np.float32)

    def _affine(self, name, d_in, d_out, rng):
        self.params[f"{name}.weight"] = parameter(_xavier_uniform(rng, d_out, d_in))
        self.params[f"{name}.bias"] = parameter(np.zeros(d_out))

    def _ln(self, name, d):
        self.params[f"{name}.gamma"] = parameter(np.ones(d))
        self.params[f"{name}.beta"] = parameter(np.zeros(d))

    def conv(self, name, x, stride=1):
        return ops.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride, pad=1)

    def bn(self, name, x, training):
        return ops.batchnorm2d(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training,
        )

    def affine(self, name, x):
        return ops.affine(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def ln(self, name, x):
        return ops.layernorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    # -- state ------------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ConfigError(f"missing tensor {name}")
            if arrays[name].shape != p.shape:
                raise ShapeError(f"tensor {name}: expected {p.shape}, got {arrays[name].shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)
        for name, b in self.buffers.items():
            if name not in arrays:
                raise ConfigError(f"missing buffer {name}")
            if arrays[name].shape != b.shape:
                raise ShapeError(f"buffer {name}: expected {b.shape}, got {arrays[name].shape}")
            self.buffers[name] = np.array(arrays[name], dtype=b.dtype)

    def schema(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.arrays().items()}

    def astype(self, dtype) -> "Network":
        """Copy with every parameter and buffer cast (float64 for gradient checks)."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for k, p in self.params.items()}
        clone.buffers = {k: b.astype(dtype) for k, b in self.buffers.items()}
        return clone

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


class FeatureExtractor(Network):
    """Five stride-2 down-modules (conv/bn/relu twice) then a flatten + projection."""

    prefix = "fe."

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c_in = PATCH_SHAPE[0]
        for i, c in enumerate(cfg.fe_channels):
            self._conv(f"fe.down{i}.conv_a", c_in, c, rng)
            self._bn(f"fe.down{i}.bn_a", c)
            self._conv(f"fe.down{i}.conv_b", c, c, rng)
            self._bn(f"fe.down{i}.bn_b", c)
            c_in = c
        lh, lw = cfg.latent_hw
        self._affine("fe.proj", c_in * lh * lw, cfg.hidden, rng)

    def forward(self, x: Tensor, training: bool, trace: list | None = None) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != PATCH_SHAPE:
            raise ShapeError(f"feature extractor expects B x {PATCH_SHAPE}, got {x.shape}")
        if trace is not None:
            trace.append(x.shape[2:])
        for i in range(len(self.cfg.fe_channels)):
            x = ops.relu(self.bn(f"fe.down{i}.bn_a", self.conv(f"fe.down{i}.conv_a", x, stride=2), training))
            x = ops.relu(self.bn(f"fe.down{i}.bn_b", self.conv(f"fe.down{i}.conv_b", x), training))
            if trace is not None:
                trace.append(x.shape[2:])
        x = x.reshape(x.shape[0], -1)
        return self.affine("fe.proj", x)


class Decoder(Network):
    """Alignment affine, reshape to the latent map, five upsample/conv/bn/relu modules, conv + tanh."""

    prefix = "decoder."

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        top = cfg.fe_channels[-1]
        lh, lw = cfg.latent_hw
        self._affine("decoder.align", cfg.hidden, top * lh * lw, rng)
        c_in = top
        for i, c in enumerate(cfg.decoder_channels):
            self._conv(f"decoder.up{i}.conv", c_in, c, rng)
            self._bn(f"decoder.up{i}.bn", c)
            c_in = c
        self._conv("decoder.out", c_in, PATCH_SHAPE[0], rng)

    def forward(self, tokens: Tensor, training: bool, trace: list | None = None) -> Tensor:
        if tokens.shape[-1] != self.cfg.hidden:
            raise ShapeError(f"decoder expects hidden size {self.cfg.hidden}, got {tokens.shape[-1]}")
        lead = tokens.shape[:-1]
        x = self.affine("decoder.align", tokens.reshape(-1, self.cfg.hidden))
        lh, lw = self.cfg.latent_hw
        x = x.reshape(x.shape[0], self.cfg.fe_channels[-1], lh, lw)
        if trace is not None:
            trace.append(x.shape[2:])
        for i in range(len(self.cfg.decoder_channels)):
            x = ops.upsample_nearest2x(x)
            x = ops.relu(self.bn(f"decoder.up{i}.bn", self.conv(f"decoder.up{i}.conv", x), training))
            if trace is not None:
                trace.append(x.shape[2:])
        x = ops.tanh(self.conv("decoder.out", x))
        return x.reshape(lead + PATCH_SHAPE)


@dataclass
class LatentSequence:
    tokens: Tensor  # B x L x H, position 0 is CLS
    mask_flags: np.ndarray  # B x n bool, True = masked

    @property
    def n(self) -> int:
        return self.mask_flags.shape[1]


class Bottleneck(Network):
    """Post-norm BERT-style encoder with learnable positions, CLS and mask tokens."""

    prefix = "bottleneck."

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.params["bottleneck.pos"] = parameter(rng.normal(0.0, 0.02, size=(cfg.max_seq_len, h)))
        self.params["bottleneck.cls"] = parameter(rng.normal(0.0, 0.02, size=h))
        self.params["bottleneck.mask_token"] = parameter(rng.normal(0.0, 0.02, size=h))
        for i in range(cfg.layers):
            p = f"bottleneck.block{i}"
            for proj in "qkvo":
                self._affine(f"{p}.attn.{proj}", h, h, rng)
            self._ln(f"{p}.ln1", h)
            self._affine(f"{p}.ffn1", h, cfg.ffn, rng)
            self._affine(f"{p}.ffn2", cfg.ffn, h, rng)
            self._ln(f"{p}.ln2", h)

    def assemble(self, v: Tensor, mask: np.ndarray | None = None) -> LatentSequence:
        """Prepend CLS, swap masked rows for the mask token, add positions."""
        b, n, h = v.shape
        if h != self.cfg.hidden:
            raise ShapeError(f"bottleneck expects hidden size {self.cfg.hidden}, got {h}")
        if n + 1 > self.cfg.max_seq_len:
            raise ConfigError(f"sequence of {n} patches + CLS exceeds max_seq_len {self.cfg.max_seq_len}")
        mask = np.zeros((b, n), bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != (b, n):
            raise ShapeError(f"mask shape {mask.shape} does not match tokens {(b, n)}")
        body = ops.where(mask[..., None], self.params["bottleneck.mask_token"], v) if mask.any() else v
        cls = ops.take(self.params["bottleneck.cls"].reshape(1, 1, h), np.zeros(b, np.intp), axis=0)
        seq = ops.concat([cls, body], axis=1)
        pos = ops.take(self.params["bottleneck.pos"], np.arange(n + 1), axis=0)
        return LatentSequence(seq + pos, mask)

    def forward(self, seq: LatentSequence, training: bool, rng: np.random.Generator | None = None) -> Tensor:
        x = seq.tokens
        length = x.shape[1]
        if length < 2:
            raise ShapeError("bottleneck needs at least CLS plus one patch")
        if length > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {length} exceeds max_seq_len {self.cfg.max_seq_len}")
        p_drop = self.cfg.dropout
        for i in range(self.cfg.layers):
            p = f"bottleneck.block{i}"
            a = ops.multi_head_self_attention(
                x, self.params, self.cfg.heads, prefix=f"{p}.attn.", dropout_p=p_drop, rng=rng, training=training
            )
            x = self.ln(f"{p}.ln1", x + ops.dropout(a, p_drop, rng, training))
            f = self.affine(f"{p}.ffn2", ops.gelu(self.affine(f"{p}.ffn1", x)))
            x = self.ln(f"{p}.ln2", x + ops.dropout(f, p_drop, rng, training))
        return x


class Head(Network):
    """BERT pooler (affine + tanh on CLS) and an output affine."""

    prefix = "head."

    def __init__(self, hidden: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_out = n_out
        self._affine("head.pooler", hidden, hidden, rng)
        self._affine("head.out", hidden, n_out, rng)

    def forward(self, cls: Tensor) -> Tensor:
        return self.affine("head.out", ops.tanh(self.affine("head.pooler", cls)))


class Patchifier:
    """The three pre-trained networks, each initialized from its own RNG stream."""

    PARTS = ("fe", "bottleneck", "decoder")

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        ss = np.random.SeedSequence([seed, 0x1A17])
        rngs = [np.random.default_rng(s) for s in ss.spawn(3)]
        self.fe = FeatureExtractor(self.cfg, rngs[0])
        self.bottleneck = Bottleneck(self.cfg, rngs[1])
        self.decoder = Decoder(self.cfg, rngs[2])

    def parts(self, names=PARTS) -> list[Network]:
        return [getattr(self, n) for n in names]

    def params(self, names=PARTS) -> dict[str, Tensor]:
        out = {}
        for net in self.parts(names):
            out.update(net.params)
        return out

    def arrays(self, names=PARTS) -> dict[str, np.ndarray]:
        out = {}
        for net in self.parts(names):
            out.update(net.arrays())
        return out

    def schema(self, names=PARTS) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.arrays(names).items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], names=PARTS) -> None:
        for net in self.parts(names):
            net.load_arrays(arrays)

    def embed(self, grids: Tensor, training: bool, rng=None) -> Tensor:
        """Unmasked forward of B x n patch grids to the B x H CLS outputs."""
        b, n = grids.shape[:2]
        v = self.fe.forward(grids.reshape(b * n, *PATCH_SHAPE), training).reshape(b, n, self.cfg.hidden)
        h = self.bottleneck.forward(self.bottleneck.assemble(v), training, rng)
        return h[:, 0, :]


# ---------------------------------------------------------------------------
# closed-form parameter counts


def fe_param_count(cfg: ModelConfig) -> int:
    total, c_in = 0, PATCH_SHAPE[0]
    for c in cfg.fe_channels:
        total += (9 * c_in * c + c + 2 * c) + (9 * c * c + c + 2 * c)
        c_in = c
    lh, lw = cfg.latent_hw
    return total + c_in * lh * lw * cfg.hidden + cfg.hidden


def bottleneck_param_count(cfg: ModelConfig) -> int:
    h, f = cfg.hidden, cfg.ffn
    block = 4 * (h * h + h) + 2 * (2 * h) + (h * f + f) + (f * h + h)
    return cfg.max_seq_len * h + 2 * h + cfg.layers * block


def decoder_param_count(cfg: ModelConfig) -> int:
    lh, lw = cfg.latent_hw
    flat = cfg.fe_channels[-1] * lh * lw
    total = cfg.hidden * flat + flat
    c_in = cfg.fe_channels[-1]
    for c in cfg.decoder_channels:
        total += 9 * c_in * c + c + 2 * c
        c_in = c
    return total + 9 * c_in * PATCH_SHAPE[0] + PATCH_SHAPE[0]


def head_param_count(hidden: int, n_out: int) -> int:
    return hidden * hidden + hidden + hidden * n_out + n_out
