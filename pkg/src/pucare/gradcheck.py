"""Finite-difference verification of every differentiable operation.

Each case builds random double-precision inputs for one seed and returns a
scalar function of them; :func:`run_suite` checks all cases over several
seeds and reports the worst relative error per operation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import (
    ModelConfig,
    ModelParams,
    attention_block_forward,
    conv_block_forward,
    forward,
    init_params,
    se_block_forward,
)
from .tensor import Tensor

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4
KINK_GAP = 1e-3


@dataclass
class CaseResult:
    op: str
    seeds: int
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _away_from_zero(x: np.ndarray, gap: float = KINK_GAP) -> np.ndarray:
    return np.where(x >= 0, x + gap, x - gap)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(weights)))


def _distinct(shape, rng) -> np.ndarray:
    """Values with pairwise gaps >= 0.01 so max-pool windows have no near-ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005 + rng.uniform(0, 0.001)).reshape(shape)


# each builder: rng -> (fn, inputs, max_elements or None)
def _conv2d(rng):
    x, w, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    stride = int(rng.integers(1, 3))
    out_hw = (6 + 2 - 3) // stride + 1
    r = rng.normal(size=(2, 4, out_hw, out_hw))
    return (lambda x, w, b: _weighted_sum(T.conv2d(x, w, b, stride=stride, padding=1), r)), [x, w, b], None


def _max_pool(rng):
    x = _distinct((2, 2, 4, 4), rng)
    r = rng.normal(size=(2, 2, 2, 2))
    return (lambda x: _weighted_sum(T.max_pool2x2(x), r)), [x], None


def _upsample(rng):
    x = rng.normal(size=(2, 2, 3, 3))
    r = rng.normal(size=(2, 2, 6, 6))
    return (lambda x: _weighted_sum(T.upsample2x(x), r)), [x], None


def _batch_norm(rng):
    training = bool(rng.integers(0, 2))
    x = rng.normal(size=(3, 2, 4, 4)) * 2 + 1
    g, b = rng.normal(size=2) + 1.5, rng.normal(size=2)
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
    r = rng.normal(size=x.shape)
    return (lambda x, g, b: _weighted_sum(T.batch_norm(x, g, b, rm.copy(), rv.copy(), training), r)), [x, g, b], None


def _global_avg_pool(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    r = rng.normal(size=(2, 3, 1, 1))
    return (lambda x: _weighted_sum(T.global_avg_pool(x), r)), [x], None


def _dense(rng):
    x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)
    r = rng.normal(size=(3, 4))
    return (lambda x, w, b: _weighted_sum(T.dense(x, w, b), r)), [x, w, b], None


def _relu(rng):
    x = _away_from_zero(rng.normal(size=(2, 3, 4, 4)))
    r = rng.normal(size=x.shape)
    return (lambda x: _weighted_sum(T.relu(x), r)), [x], None


def _sigmoid(rng):
    x = rng.normal(size=(2, 3, 4, 4)) * 3
    r = rng.normal(size=x.shape)
    return (lambda x: _weighted_sum(T.sigmoid(x), r)), [x], None


def _concat(rng):
    a, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))
    r = rng.normal(size=(2, 5, 3, 3))
    return (lambda a, b: _weighted_sum(T.concat_channels(a, b), r)), [a, b], None


def _add(rng):
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(2, 3, 1, 1) if rng.integers(0, 2) else a.shape)
    r = rng.normal(size=a.shape)
    return (lambda a, b: _weighted_sum(T.add(a, b), r)), [a, b], None


def _mul(rng):
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=[(2, 3, 1, 1), (2, 1, 4, 4), a.shape][int(rng.integers(0, 3))])
    r = rng.normal(size=a.shape)
    return (lambda a, b: _weighted_sum(T.mul(a, b), r)), [a, b], None


def _fan_out(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    r = rng.normal(size=x.shape)
    return (lambda x: _weighted_sum(T.add(T.mul(x, x), T.sigmoid(x)), r)), [x], None


def _pipeline(rng):
    """conv2d -> batch_norm -> relu -> global_avg_pool."""
    x, w = rng.normal(size=(3, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    g, b = rng.normal(size=3) + 1.5, rng.normal(size=3)
    r = rng.normal(size=(3, 3, 1, 1))

    def fn(x, w, g, b):
        h = T.batch_norm(T.conv2d(x, w, padding=1), g, b, np.zeros(3), np.ones(3), True)
        return _weighted_sum(T.global_avg_pool(T.relu(h)), r)

    return fn, [x, w, g, b], None


def _block_params(cfg: ModelConfig, rng) -> ModelParams:
    params = init_params(cfg, dtype=np.float64)
    for name, w in params.weights.items():
        if name.endswith(".gamma"):
            w.data[...] = rng.uniform(0.5, 1.5, size=w.shape)
        elif name.endswith((".b", ".beta")):
            w.data[...] = rng.normal(scale=0.1, size=w.shape)
    return params


def _scoped(params: ModelParams, prefix: str) -> tuple[list[str], list[np.ndarray]]:
    names = [k for k in params.weights if k.startswith(prefix + ".")]
    return names, [params.weights[k].data.copy() for k in names]


def _rebuild(params: ModelParams, names: list[str], tensors) -> ModelParams:
    weights = dict(params.weights)
    weights.update(zip(names, tensors))
    return ModelParams(weights, {k: v.copy() for k, v in params.buffers.items()})


def _conv_block(rng):
    cfg = ModelConfig(input_size=8, levels=1, base_channels=4, seed=int(rng.integers(1 << 31)))
    params = _block_params(cfg, rng)
    names, arrays = _scoped(params, "enc0")
    x = rng.normal(size=(2, 3, 6, 6))
    r = rng.normal(size=(2, 4, 6, 6))

    def fn(x, *ws):
        p = _rebuild(params, names, ws)
        return _weighted_sum(conv_block_forward(x, p.scope("enc0"), training=True), r)

    return fn, [x, *arrays], 12


def _se_block(rng):
    cfg = ModelConfig(input_size=8, levels=1, base_channels=8, se_reduction=4, seed=int(rng.integers(1 << 31)))
    params = _block_params(cfg, rng)
    names, arrays = _scoped(params, "dec0.se")
    x = rng.normal(size=(4, 8, 3, 3)) + rng.normal(size=(1, 8, 1, 1))
    r = rng.normal(size=(4, 8, 1, 1))

    def fn(x, *ws):
        p = _rebuild(params, names, ws)
        return _weighted_sum(se_block_forward(x, p.scope("dec0.se"), training=True), r)

    return fn, [x, *arrays], None


def _attention_block(rng):
    cfg = ModelConfig(input_size=8, levels=1, base_channels=3, seed=int(rng.integers(1 << 31)))
    params = _block_params(cfg, rng)
    names, arrays = _scoped(params, "dec0.attn")
    skip, gated = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    se = rng.uniform(0.1, 0.9, size=(2, 3, 1, 1))
    r = rng.normal(size=(2, 3, 4, 4))

    def fn(skip, gated, se, *ws):
        p = _rebuild(params, names, ws)
        return _weighted_sum(attention_block_forward(skip, gated, se, p.scope("dec0.attn")), r)

    return fn, [skip, gated, se, *arrays], None


SMALL_MODEL = dict(input_size=32, levels=2, base_channels=4)


def model_case(rng, n_tensors: int = 12, elements: int = 1, attention: bool = True):
    """Mean BCE of the small model, perturbing ``elements`` entries of ``n_tensors`` random weights."""
    from .training import bce_loss

    cfg = ModelConfig(**SMALL_MODEL, attention=attention, seed=int(rng.integers(1 << 31)))
    params = _block_params(cfg, rng)
    names = list(params.weights)
    chosen = sorted(rng.choice(len(names), size=min(n_tensors, len(names)), replace=False))
    picked = [names[i] for i in chosen]
    arrays = [params.weights[k].data.copy() for k in picked]
    x = rng.random((2, 3, 32, 32))
    target = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float64)

    def fn(*ws):
        p = _rebuild(params, picked, ws)
        return bce_loss(forward(Tensor(x), p, cfg, training=True), target)

    return fn, arrays, elements


def _model(rng):
    return model_case(rng)


# (builder, tolerance, epsilon). Piecewise-linear ops are exact under central
# differences, so a large step only reduces round-off; it must stay below the
# kink gap (relu) and the tie gap (max pool).
CASES: dict[str, tuple[Callable, float, float]] = {
    "conv2d": (_conv2d, LINEAR_TOL, 1e-3),
    "max_pool2x2": (_max_pool, LINEAR_TOL, 1e-3),
    "upsample2x": (_upsample, LINEAR_TOL, 1e-3),
    "global_avg_pool": (_global_avg_pool, LINEAR_TOL, 1e-3),
    "dense": (_dense, LINEAR_TOL, 1e-3),
    "concat_channels": (_concat, LINEAR_TOL, 1e-3),
    "add": (_add, LINEAR_TOL, 1e-3),
    "mul": (_mul, LINEAR_TOL, 1e-3),
    "relu": (_relu, LINEAR_TOL, 1e-4),
    "sigmoid": (_sigmoid, NONLINEAR_TOL, 1e-5),
    "batch_norm": (_batch_norm, NONLINEAR_TOL, 1e-5),
    "fan_out": (_fan_out, NONLINEAR_TOL, 1e-5),
    "conv_bn_relu_gap": (_pipeline, NONLINEAR_TOL, 1e-5),
    "conv_block": (_conv_block, NONLINEAR_TOL, 1e-5),
    "se_block": (_se_block, NONLINEAR_TOL, 1e-5),
    "attention_block": (_attention_block, NONLINEAR_TOL, 1e-5),
    # a 1e-5 step moves enough relu pre-activations across zero to spoil the
    # estimate in a network this deep; 1e-6 keeps round-off below 1e-6
    "model": (_model, NONLINEAR_TOL, 1e-6),
}


def check_case(op: str, seed: int, epsilon: float | None = None) -> float:
    builder, _, default_eps = CASES[op]
    rng = np.random.default_rng([seed, len(op)] + [ord(ch) for ch in op])
    fn, inputs, max_elements = builder(rng)
    eps = default_eps if epsilon is None else epsilon
    return max(T.grad_check(fn, inputs, epsilon=eps, max_elements=max_elements, rng=rng))


def run_suite(ops=None, seeds: int = 20, epsilon: float | None = None) -> list[CaseResult]:
    results = []
    for op in ops or CASES:
        if op not in CASES:
            raise KeyError(f"unknown operation {op!r}; choose from {', '.join(CASES)}")
        start = time.perf_counter()
        worst = max(check_case(op, s, epsilon) for s in range(seeds))
        results.append(CaseResult(op, seeds, worst, CASES[op][1], time.perf_counter() - start))
    return results


def format_table(results: list[CaseResult]) -> str:
    lines = [f"{'operation':<20} {'seeds':>5} {'max rel err':>12} {'tol':>8} {'time s':>7}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.op:<20} {r.seeds:>5} {r.max_rel_error:>12.3e} {r.tolerance:>8.0e} {r.seconds:>7.2f}  {status}")
    return "\n".join(lines)
