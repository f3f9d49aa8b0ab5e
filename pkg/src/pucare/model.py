"""Residual U-Net with squeeze-excitation and spatial attention on the skips.

Layout for ``levels = L``::

    enc0 .. enc{L-1}   conv block, keep skip, 2x2 max pool
    bottleneck         conv block
    dec{L-1} .. dec0   upsample -> 3x3 conv halving channels -> attention
                       module against the skip -> concat -> conv block
    head               1x1 conv -> sigmoid

The attention module on each decoder level is an SE block computed on the
upsampled feature (channel weights), followed by a spatial gate that
rescales the encoder skip. With ``attention=False`` the raw skip is
concatenated directly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    in_channels: int = 3
    levels: int = 4
    base_channels: int = 16
    se_reduction: int = 4
    attention: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ParameterError(f"levels must be >= 1, got {self.levels}")
        if self.input_size < 1 or self.input_size % (2**self.levels):
            raise ParameterError(
                f"input_size {self.input_size} must be a positive multiple of 2**levels = {2**self.levels}"
            )
        if self.in_channels < 1 or self.base_channels < 1:
            raise ParameterError("in_channels and base_channels must be >= 1")
        if self.se_reduction < 1:
            raise ParameterError(f"se_reduction must be >= 1, got {self.se_reduction}")

    @property
    def widths(self) -> list[int]:
        """Channel width of each encoder level, then the bottleneck."""
        return [self.base_channels * 2**i for i in range(self.levels + 1)]

    def se_hidden(self, channels: int) -> int:
        return max(channels // self.se_reduction, 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class ModelParams:
    """Named trainable tensors plus batch-norm running statistics."""

    weights: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.weights)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.weights.values())).dtype

    def num_parameters(self) -> int:
        return int(np.sum([w.data.size for w in self.weights.values()]))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        table = {k: w.shape for k, w in self.weights.items()}
        table.update({k: b.shape for k, b in self.buffers.items()})
        return table

    def arrays(self) -> dict[str, np.ndarray]:
        """Every tensor (weights then buffers) as a plain array, by name."""
        out = {k: w.data for k, w in self.weights.items()}
        out.update(self.buffers)
        return out

    def copy(self, dtype=None) -> ModelParams:
        dt = np.dtype(dtype) if dtype is not None else None
        return ModelParams(
            {k: Tensor(w.data.astype(dt or w.dtype, copy=True), requires_grad=True, name=k) for k, w in self.weights.items()},
            {k: b.astype(dt or b.dtype, copy=True) for k, b in self.buffers.items()},
        )

    def zero_grad(self) -> None:
        for w in self.weights.values():
            w.grad = None

    def scope(self, prefix: str) -> _Scope:
        return _Scope(self, prefix)


class _Scope:
    """View of the parameters under ``prefix.``; keeps block code short."""

    def __init__(self, params: ModelParams, prefix: str):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.params.weights[f"{self.prefix}.{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}.{name}" in self.params.weights

    def buffer(self, name: str) -> np.ndarray:
        return self.params.buffers[f"{self.prefix}.{name}"]

    def sub(self, name: str) -> _Scope:
        return _Scope(self.params, f"{self.prefix}.{name}")


# ---------------------------------------------------------------------------
# parameter layout


def _conv_block_layout(cin: int, cout: int) -> list[tuple[str, tuple[int, ...], str]]:
    # the 3x3 convs feed batch norm directly, so a bias would be cancelled
    spec = [
        ("conv1.w", (cout, cin, 3, 3), "weight"),
        ("bn1.gamma", (cout,), "one"),
        ("bn1.beta", (cout,), "zero"),
        ("conv2.w", (cout, cout, 3, 3), "weight"),
        ("bn2.gamma", (cout,), "one"),
        ("bn2.beta", (cout,), "zero"),
    ]
    if cin != cout:
        spec += [("proj.w", (cout, cin, 1, 1), "weight"), ("proj.b", (cout,), "zero")]
    return spec


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered ``(name, shape, init kind)`` for every trainable tensor."""
    widths = cfg.widths
    layout: list[tuple[str, tuple[int, ...], str]] = []

    def block(prefix, cin, cout):
        layout.extend((f"{prefix}.{n}", s, k) for n, s, k in _conv_block_layout(cin, cout))

    cin = cfg.in_channels
    for i in range(cfg.levels):
        block(f"enc{i}", cin, widths[i])
        cin = widths[i]
    block("bottleneck", cin, widths[-1])
    for i in reversed(range(cfg.levels)):
        c = widths[i]
        layout += [(f"dec{i}.up.w", (c, widths[i + 1], 3, 3), "weight"), (f"dec{i}.up.b", (c,), "zero")]
        if cfg.attention:
            h = cfg.se_hidden(c)
            layout += [
                (f"dec{i}.se.bn.gamma", (c,), "one"),
                (f"dec{i}.se.bn.beta", (c,), "zero"),
                (f"dec{i}.se.fc1.w", (h, c), "weight"),
                (f"dec{i}.se.fc1.b", (h,), "zero"),
                (f"dec{i}.se.fc2.w", (c, h), "weight"),
                (f"dec{i}.se.fc2.b", (c,), "zero"),
                (f"dec{i}.attn.w", (1, 2 * c, 1, 1), "weight"),
                (f"dec{i}.attn.b", (1,), "zero"),
            ]
        block(f"dec{i}.block", 2 * c, c)
    layout += [("head.w", (1, widths[0], 1, 1), "weight"), ("head.b", (1,), "zero")]
    return layout


def init_bound(shape: tuple[int, ...]) -> float:
    """Half-width of the uniform init range: ``sqrt(6 / fan_in)``."""
    fan_in = int(np.prod(shape[1:]))
    return float(np.sqrt(6.0 / fan_in))


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    """Fresh parameters drawn from ``cfg.seed``; BN starts as the identity."""
    rng = np.random.default_rng(cfg.seed)
    dt = np.dtype(dtype)
    weights: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, shape, kind in param_layout(cfg):
        if kind == "weight":
            bound = init_bound(shape)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        weights[name] = Tensor(arr.astype(dt), requires_grad=True, name=name)
        if name.endswith(".gamma"):
            stem = name[: -len(".gamma")]
            buffers[f"{stem}.running_mean"] = np.zeros(shape, dtype=dt)
            buffers[f"{stem}.running_var"] = np.ones(shape, dtype=dt)
    return ModelParams(weights, buffers)


def zero_params(cfg: ModelConfig, dtype=np.float64) -> ModelParams:
    """Parameters with every weight, bias and BN shift set to zero (gamma = 1)."""
    params = init_params(cfg, dtype)
    for name, w in params.weights.items():
        if not name.endswith(".gamma"):
            w.data[...] = 0
    return params


# ---------------------------------------------------------------------------
# blocks


def _bn(x: Tensor, p: _Scope, name: str, training: bool) -> Tensor:
    return T.batch_norm(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        p.buffer(f"{name}.running_mean"),
        p.buffer(f"{name}.running_var"),
        training,
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )


def conv_block_forward(x: Tensor, p: _Scope, training: bool) -> Tensor:
    """Residual block: relu(BN(conv(relu(BN(conv(x))))) + shortcut(x))."""
    w1 = p["conv1.w"]
    if x.ndim != 4 or x.shape[1] != w1.shape[1]:
        raise ShapeError(f"{p.prefix}: expected {w1.shape[1]} input channels, got input {x.shape}")
    h = T.conv2d(x, w1, padding=1)
    h = T.relu(_bn(h, p, "bn1", training))
    h = T.conv2d(h, p["conv2.w"], padding=1)
    h = _bn(h, p, "bn2", training)
    skip = T.conv2d(x, p["proj.w"], p["proj.b"]) if "proj.w" in p else x
    return T.relu(T.add(h, skip))


def se_block_forward(x: Tensor, p: _Scope, training: bool) -> Tensor:
    """Channel weights in (0, 1) of shape N x C x 1 x 1."""
    c = p["bn.gamma"].shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"{p.prefix}: expected {c} channels, got input {x.shape}")
    n = x.shape[0]
    s = T.reshape(T.global_avg_pool(x), (n, c))
    s = _bn(s, p, "bn", training)
    s = T.relu(T.dense(s, p["fc1.w"], p["fc1.b"]))
    s = T.sigmoid(T.dense(s, p["fc2.w"], p["fc2.b"]))
    return T.reshape(s, (n, c, 1, 1))


def attention_block_forward(skip: Tensor, gated: Tensor, se_weights: Tensor, p: _Scope) -> Tensor:
    """Rescale ``skip`` by a spatial map computed from channel-gated decoder features."""
    if skip.shape != gated.shape:
        raise ShapeError(f"{p.prefix}: skip {skip.shape} and decoder feature {gated.shape} differ")
    if se_weights.shape != gated.shape[:2] + (1, 1):
        raise ShapeError(f"{p.prefix}: channel weights {se_weights.shape} do not match {gated.shape}")
    d = T.mul(gated, se_weights)
    a = T.sigmoid(T.conv2d(T.concat_channels(d, skip), p["w"], p["b"]))
    return T.mul(skip, a)


def _check_input(batch: Tensor, cfg: ModelConfig) -> None:
    want = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if batch.ndim != 4 or batch.shape[1:] != want:
        raise ShapeError(f"model expects input N x {want[0]} x {want[1]} x {want[2]}, got {batch.shape}")


def _forward(batch: Tensor, params: ModelParams, cfg: ModelConfig, training: bool, attention: bool) -> Tensor:
    _check_input(batch, cfg)
    skips = []
    h = batch
    for i in range(cfg.levels):
        h = conv_block_forward(h, params.scope(f"enc{i}"), training)
        skips.append(h)
        h = T.max_pool2x2(h)
    h = conv_block_forward(h, params.scope("bottleneck"), training)
    for i in reversed(range(cfg.levels)):
        p = params.scope(f"dec{i}")
        up = T.relu(T.conv2d(T.upsample2x(h), p["up.w"], p["up.b"], padding=1))
        skip = skips[i]
        if attention:
            se = se_block_forward(up, p.sub("se"), training)
            h = T.concat_channels(T.mul(up, se), attention_block_forward(skip, up, se, p.sub("attn")))
        else:
            h = T.concat_channels(up, skip)
        h = conv_block_forward(h, p.sub("block"), training)
    return T.sigmoid(T.conv2d(h, params["head.w"], params["head.b"]))


def model_forward(batch: Tensor, params: ModelParams, cfg: ModelConfig, training: bool = False) -> Tensor:
    """Wound probabilities, N x 1 x S x S, strictly inside (0, 1)."""
    if not cfg.attention:
        raise ParameterError("config has attention disabled; use model_forward_no_attention")
    return _forward(batch, params, cfg, training, attention=True)


def model_forward_no_attention(batch: Tensor, params: ModelParams, cfg: ModelConfig, training: bool = False) -> Tensor:
    """Ablation: the raw skip is concatenated, SE and spatial gate are skipped."""
    return _forward(batch, params, cfg, training, attention=False)


def forward(batch: Tensor, params: ModelParams, cfg: ModelConfig, training: bool = False) -> Tensor:
    """Dispatch on ``cfg.attention``."""
    return _forward(batch, params, cfg, training, attention=cfg.attention)


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    """Raise if ``params`` does not have exactly the layout ``cfg`` implies."""
    expected = {name: shape for name, shape, _ in param_layout(cfg)}
    got = {k: w.shape for k, w in params.weights.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise ParameterError(
            f"parameters do not match config: missing={missing[:5]} extra={extra[:5]} wrong_shape={wrong[:5]}"
        )
