"""Loss, optimisers, dataset splitting, the training loop and evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data_io import Dataset
from .errors import DataError, ParameterError, ShapeError
from .metrics import Confusion, MetricTriple, binarize, confusion_counts, macro_average, metric_triple, micro_average
from .model import ModelConfig, ModelParams, check_params, forward, init_params
from .seeding import derive_rng, digest_arrays
from .tensor import Tensor

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "bce"
    binarize_threshold: float = 0.5
    seed: int = 0
    early_stop_patience: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.loss != "bce":
            raise ParameterError(f"only the 'bce' loss is available, got {self.loss!r}")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ParameterError(f"binarize_threshold must lie in (0, 1), got {self.binarize_threshold}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ParameterError("early_stop_patience must be >= 1 or None")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.10
    test_frac: float = 0.20
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) < 0 or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise ParameterError(f"split fractions must be non-negative and sum to 1, got {fracs}")


MIN_SPLIT_SIZE = 10


def split_dataset(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then contiguous cuts at ``floor(train*n)`` and ``floor((train+val)*n)``."""
    n = len(ds)
    if n < MIN_SPLIT_SIZE:
        raise DataError(f"need at least {MIN_SPLIT_SIZE} samples to split, got {n}")
    order = derive_rng("split", spec.seed).permutation(n)
    # tolerance keeps 0.7 * 100 from flooring to 69
    a = math.floor(spec.train_frac * n + 1e-9)
    b = math.floor((spec.train_frac + spec.val_frac) * n + 1e-9)
    ids = ds.ids
    parts = []
    for name, idx in (("train", order[:a]), ("val", order[a:b]), ("test", order[b:])):
        part = ds.subset([ids[i] for i in idx], note=name)
        part.meta["split"] = {"name": name, "seed": spec.seed, "ids": part.ids}
        parts.append(part)
    return tuple(parts)


# ---------------------------------------------------------------------------
# loss and optimisers


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to ``[1e-7, 1 - 1e-7]``."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        if t.ndim == pred.ndim - 1 and t.shape == pred.shape[:1] + pred.shape[2:]:
            t = t[:, None]
        else:
            raise ShapeError(f"bce_loss shape mismatch: prediction {pred.shape} vs target {np.shape(target)}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    value = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    inside = (pred.data >= BCE_EPS) & (pred.data <= 1.0 - BCE_EPS)

    def _backward(g):
        return (g * inside * (p - t) / (p * (1.0 - p)) / n,)

    return Tensor._from_op(np.asarray(value, dtype=pred.dtype), (pred,), _backward)


class SGD:
    def __init__(self, params: ModelParams, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for w in self.params.weights.values():
            if w.grad is not None:
                w.data -= w.dtype.type(self.lr) * w.grad


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(w.data) for k, w in params.weights.items()}
        self.v = {k: np.zeros_like(w.data) for k, w in params.weights.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, w in self.params.weights.items():
            g = w.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w.data -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(w.dtype, copy=False)


def make_optimizer(params: ModelParams, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# history


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float | None
    val_iou: float | None
    val_dsc: float | None
    wall_time: float
    rng_digest: str
    param_digest: str


@dataclass
class TrainHistory:
    initial_loss: float | None = None
    final_loss: float | None = None
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "stopped_early": self.stopped_early,
            "digest": self.digest(),
            "epochs": [asdict(r) for r in self.epochs],
        }

    def digest(self) -> str:
        """Hash of everything except wall-clock times."""
        rows = [
            (r.epoch, r.train_loss, r.val_acc, r.val_iou, r.val_dsc, r.rng_digest, r.param_digest) for r in self.epochs
        ]
        text = repr((self.initial_loss, self.final_loss, self.stopped_early, rows))
        return digest_arrays(np.frombuffer(text.encode(), dtype=np.uint8))

    def val_dsc(self) -> list[float | None]:
        return [r.val_dsc for r in self.epochs]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    id: str
    confusion: Confusion
    metrics: MetricTriple


@dataclass
class EvalResult:
    rows: list[EvalRow]
    macro: MetricTriple
    micro: MetricTriple

    def per_sample(self) -> dict[str, MetricTriple]:
        return {r.id: r.metrics for r in self.rows}


def _check_sizes(ds: Dataset, model_cfg: ModelConfig, what: str) -> None:
    want = (model_cfg.input_size, model_cfg.input_size, model_cfg.in_channels)
    for s in ds:
        if s.image.shape != want:
            raise DataError(f"{what} sample {s.id!r} has shape {s.image.shape}; the model needs {want}")


def predict_proba(images: np.ndarray, params: ModelParams, model_cfg: ModelConfig) -> np.ndarray:
    """Eval-mode probabilities for ``N x 3 x S x S`` images, one image per forward pass."""
    out = [forward(Tensor(images[i : i + 1].astype(params.dtype)), params, model_cfg, training=False).data for i in range(len(images))]
    return np.concatenate(out, axis=0)


def evaluate_model(ds: Dataset, params: ModelParams, model_cfg: ModelConfig, cfg: TrainConfig = TrainConfig()) -> EvalResult:
    """Binarize eval-mode predictions and score each image against its mask."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    _check_sizes(ds, model_cfg, "evaluation")
    rows = []
    for s in ds:
        prob = predict_proba(s.image.transpose(2, 0, 1)[None], params, model_cfg)[0, 0]
        c = confusion_counts(binarize(prob, cfg.binarize_threshold), s.mask)
        rows.append(EvalRow(s.id, c, metric_triple(c)))
    return EvalResult(rows, macro_average([r.metrics for r in rows]), micro_average([r.confusion for r in rows]))


def dataset_loss(ds: Dataset, params: ModelParams, model_cfg: ModelConfig) -> float:
    """Mean eval-mode BCE over every pixel of ``ds``."""
    total = 0.0
    for s in ds:
        prob = predict_proba(s.image.transpose(2, 0, 1)[None], params, model_cfg)
        total += float(bce_loss(Tensor(prob), s.mask[None, None]).data)
    return total / len(ds)


# ---------------------------------------------------------------------------
# training


def fit(
    train: Dataset,
    val: Dataset | None,
    params: ModelParams,
    model_cfg: ModelConfig,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[ModelParams, TrainHistory]:
    """Mini-batch training; returns new parameters (``params`` is not modified)."""
    check_params(params, model_cfg)
    if len(train) == 0:
        raise DataError("training set is empty")
    _check_sizes(train, model_cfg, "training")
    if val is not None and len(val):
        _check_sizes(val, model_cfg, "validation")
    params = params.copy(dtype=cfg.dtype)
    history = TrainHistory()
    if cfg.epochs == 0:
        return params, history

    images = train.images(dtype=params.dtype)
    masks = train.masks()[:, None].astype(params.dtype)
    n = len(train)
    opt = make_optimizer(params, cfg)
    history.initial_loss = dataset_loss(train, params, model_cfg)
    best, since_best = -1.0, 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = derive_rng("epoch", cfg.seed, epoch).permutation(n)
        loss_sum = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            params.zero_grad()
            pred = forward(Tensor(images[idx]), params, model_cfg, training=True)
            loss = bce_loss(pred, masks[idx])
            T.backward(loss)
            opt.step()
            loss_sum += float(loss.data) * len(idx)
        metrics = None
        if val is not None and len(val):
            metrics = evaluate_model(val, params, model_cfg, cfg).macro
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n,
            val_acc=metrics.acc if metrics else None,
            val_iou=metrics.iou if metrics else None,
            val_dsc=metrics.dsc if metrics else None,
            wall_time=time.perf_counter() - start,
            rng_digest=digest_arrays(order),
            param_digest=digest_arrays(*params.arrays().values()),
        )
        history.epochs.append(record)
        log.info("epoch %d loss %.5f val_dsc %s", epoch, record.train_loss, record.val_dsc)
        if cfg.early_stop_patience is not None and metrics is not None:
            if metrics.dsc > best:
                best, since_best = metrics.dsc, 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    history.stopped_early = True
                    break
    history.final_loss = dataset_loss(train, params, model_cfg)
    return params, history


def pretrain_finetune(
    source: Dataset,
    target: Dataset,
    cfg_pre: TrainConfig,
    cfg_fine: TrainConfig,
    model_cfg: ModelConfig,
    source_val: Dataset | None = None,
    target_val: Dataset | None = None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, tuple[TrainHistory, TrainHistory]]:
    """Train on ``source`` from a fresh init, then continue on ``target`` with every weight trainable."""
    if source.samples and target.samples and source[0].image.shape != target[0].image.shape:
        raise DataError(f"source {source[0].image.shape} and target {target[0].image.shape} image sizes differ")
    params = init if init is not None else init_params(model_cfg, dtype=cfg_pre.dtype)
    check_params(params, model_cfg)
    pre, hist_pre = fit(source, source_val, params, model_cfg, cfg_pre)
    fine, hist_fine = fit(target, target_val, pre, model_cfg, cfg_fine)
    return fine, (hist_pre, hist_fine)


def epochs_to_reach(history: TrainHistory, dsc: float) -> int | None:
    """1-based epoch at which validation DSC first reaches ``dsc``."""
    for r in history.epochs:
        if r.val_dsc is not None and r.val_dsc >= dsc:
            return r.epoch + 1
    return None
