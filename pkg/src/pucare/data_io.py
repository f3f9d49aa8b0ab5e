"""Datasets, synthetic wound images, checkpoints, reports and overlays.

On-disk layouts:

* dataset directory: ``<root>/images/<id>.png`` (8-bit RGB) and
  ``<root>/masks/<id>.png`` (8-bit grayscale, ``> 127`` is wound);
* checkpoint: ``b"PUCKPT01"``, a little-endian ``uint64`` header length,
  a ``uint32`` CRC-32 of the header, the UTF-8 JSON header (config and
  tensor manifest), then the packed little-endian float blobs;
* report: UTF-8 JSON with ``"report_version": 1``.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import CorruptionError, DataError, FileReadError, FormatError, ParameterError, VersionError
from .metrics import Confusion, MetricTriple, macro_average, micro_average
from .model import ModelConfig, ModelParams, check_params
from .preprocess import normalize, resize_bilinear
from .seeding import derive_rng, digest_arrays
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PUCKPT01"
CHECKPOINT_VERSION = 1
REPORT_VERSION = 1
_PREFIX = struct.Struct("<QI")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # H x W x 3 float in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}


@dataclass
class Dataset:
    """Samples ordered by id, plus free-form provenance metadata."""

    samples: list[Sample]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = sorted(self.samples, key=lambda s: s.id)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("dataset ids must be unique")
        for s in self.samples:
            if s.image.shape[:2] != s.mask.shape:
                raise DataError(f"sample {s.id!r}: image {s.image.shape} and mask {s.mask.shape} differ")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, ids, note: str | None = None) -> Dataset:
        wanted = set(ids)
        meta = dict(self.meta)
        if note:
            meta["subset"] = note
        return Dataset([s for s in self.samples if s.id in wanted], meta)

    def images(self, dtype=np.float32) -> np.ndarray:
        """``N x 3 x H x W`` array for the model."""
        return np.stack([s.image.transpose(2, 0, 1) for s in self.samples]).astype(dtype)

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])

    def digest(self) -> str:
        arrays = []
        for s in self.samples:
            arrays += [np.frombuffer(s.id.encode(), dtype=np.uint8), s.image, s.mask]
        return digest_arrays(*arrays)


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, SyntaxError, ValueError) as exc:
        raise FileReadError(f"cannot read {path}: {exc}") from exc


def load_dataset(root) -> Dataset:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        stem = img_path.stem
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.exists():
            raise DataError(f"no mask for image {stem!r} (expected {mask_path})")
        image = normalize(_read_png(img_path, "RGB"))
        mask = (_read_png(mask_path, "L") > 127).astype(np.uint8)
        if image.shape[:2] != mask.shape:
            raise DataError(f"sample {stem!r}: image {image.shape[:2]} and mask {mask.shape} differ")
        samples.append(Sample(stem, image, mask))
    meta = {"source": str(root)}
    meta_path = root / "meta.json"
    if meta_path.exists():
        meta.update(json.loads(meta_path.read_text(encoding="utf-8")))
    return Dataset(samples, meta)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds:
        PILImage.fromarray(to_uint8(s.image), "RGB").save(root / "images" / f"{s.id}.png")
        PILImage.fromarray((s.mask > 0).astype(np.uint8) * 255, "L").save(root / "masks" / f"{s.id}.png")
    (root / "meta.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True, default=str), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic wounds

# skin base RGB, texture amplitude, coarse-noise grid, wound centre RGB, wound edge RGB
_PALETTES = {
    "source": dict(skin=(0.85, 0.70, 0.60), texture=0.05, grid=4, core=(0.90, 0.22, 0.18), rim=(0.98, 0.40, 0.34)),
    "target": dict(skin=(0.50, 0.34, 0.25), texture=0.12, grid=8, core=(0.62, 0.12, 0.08), rim=(0.80, 0.28, 0.20)),
}
_SHAPES = {
    "source": dict(axes=(0.16, 0.30), perturb=0.10),
    "target": dict(axes=(0.12, 0.26), perturb=0.20),
}


@dataclass(frozen=True)
class SyntheticSpec:
    n: int
    domain: str = "source"
    size: int = 64
    seed: int = 0
    axes_range: tuple[float, float] | None = None  # semi-axes as fractions of size
    perturb_amplitude: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"n must be >= 1, got {self.n}")
        if self.domain not in _PALETTES:
            raise ParameterError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.size < 16:
            raise ParameterError(f"size must be >= 16, got {self.size}")
        lo, hi = self.axes
        if not 0 < lo <= hi < 0.4:
            raise ParameterError(f"axes_range must satisfy 0 < lo <= hi < 0.4, got {self.axes}")
        if not 0 <= self.amplitude < 0.5:
            raise ParameterError(f"perturb_amplitude must lie in [0, 0.5), got {self.amplitude}")

    @property
    def axes(self) -> tuple[float, float]:
        return tuple(self.axes_range) if self.axes_range is not None else _SHAPES[self.domain]["axes"]

    @property
    def amplitude(self) -> float:
        return self.perturb_amplitude if self.perturb_amplitude is not None else _SHAPES[self.domain]["perturb"]


def _synthetic_sample(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = derive_rng("synthetic", spec.seed, spec.domain, index)
    pal = _PALETTES[spec.domain]
    s = spec.size

    grid = rng.random((pal["grid"] + 1, pal["grid"] + 1))
    field_ = resize_bilinear(grid, s, s, antialias=False) - 0.5
    fine = rng.random((s, s)) - 0.5
    skin = np.asarray(pal["skin"])[None, None, :] * (1.0 + 2 * pal["texture"] * field_[..., None])
    skin = skin + 0.3 * pal["texture"] * fine[..., None]

    lo, hi = spec.axes
    a, b = rng.uniform(lo * s, hi * s, size=2)
    phi = rng.uniform(0, np.pi)
    ks = np.arange(2, 5)
    coef = rng.uniform(-1, 1, size=ks.size) * spec.amplitude / ks.size
    phase = rng.uniform(0, 2 * np.pi, size=ks.size)
    reach = max(a, b) * (1.0 + np.abs(coef).sum())
    margin = reach + 2.0
    cy, cx = rng.uniform(margin, s - 1 - margin, size=2)

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(phi) + dy * np.sin(phi)) / a
    v = (-dx * np.sin(phi) + dy * np.cos(phi)) / b
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    radius = 1.0 + (coef[:, None, None] * np.sin(ks[:, None, None] * theta + phase[:, None, None])).sum(axis=0)
    mask = (rho <= radius).astype(np.uint8)

    # signed distance to the outline in pixels (approximate), ramped over 2 px
    dist = (radius - rho) * min(a, b)
    alpha = np.clip(dist / 2.0 + 0.5, 0.0, 1.0)[..., None]
    depth = np.clip(rho / radius, 0.0, 1.0)[..., None]
    wound = np.asarray(pal["core"]) * (1 - depth) + np.asarray(pal["rim"]) * depth
    wound = wound + 0.04 * (rng.random((s, s, 1)) - 0.5)
    image = np.clip(alpha * wound + (1 - alpha) * skin, 0.0, 1.0)
    return image, mask


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Skin-and-wound images fully determined by ``(spec.seed, index)``."""
    width = len(str(spec.n - 1))
    samples = []
    for i in range(spec.n):
        image, mask = _synthetic_sample(spec, i)
        samples.append(Sample(f"{spec.domain}_{i:0{width}d}", image, mask))
    meta = {
        "source": "synthetic",
        "domain": spec.domain,
        "size": spec.size,
        "seed": spec.seed,
        "axes_range": list(spec.axes),
        "perturb_amplitude": spec.amplitude,
    }
    return Dataset(samples, meta)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    seed: int | None = None
    history_digest: str | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    params: ModelParams,
    cfg: ModelConfig,
    path,
    seed: int | None = None,
    history_digest: str | None = None,
    extra: dict | None = None,
) -> None:
    check_params(params, cfg)
    manifest = []
    blobs = []
    offset = 0
    for kind, table in (("weight", {k: w.data for k, w in params.weights.items()}), ("buffer", params.buffers)):
        for name, arr in table.items():
            dt = arr.dtype.newbyteorder("<")
            code = dt.str
            if code not in _DTYPES:
                raise ParameterError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            manifest.append(
                {"name": name, "kind": kind, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "tensors": manifest,
        "blob_bytes": len(payload),
        "blob_crc32": zlib.crc32(payload),
        "seed": seed,
        "history_digest": history_digest,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_PREFIX.pack(len(head), zlib.crc32(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def _decode_tensors(header: dict, blob: memoryview, path):
    spans = []
    for entry in header["tensors"]:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CorruptionError(f"{path}: tensor {entry['name']!r} has unknown dtype {entry['dtype']!r}")
        size = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        start = entry["offset"]
        if size != entry["nbytes"] or start < 0 or start + size > len(blob):
            raise CorruptionError(f"{path}: tensor {entry['name']!r} lies outside the blob section")
        spans.append((start, start + size))
    spans.sort()
    if any(a_end > b_start for (_, a_end), (b_start, _) in zip(spans, spans[1:])):
        raise CorruptionError(f"{path}: tensor blobs overlap")
    if header["blob_bytes"] != len(blob) or zlib.crc32(blob) != header["blob_crc32"]:
        raise CorruptionError(f"{path}: tensor data is truncated or corrupted")

    cfg = ModelConfig.from_dict(header["model_config"])
    weights, buffers = {}, {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(entry["shape"], dtype=np.int64)), offset=entry["offset"])
        arr = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="), copy=True)
        if entry["kind"] == "weight":
            weights[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        else:
            buffers[entry["name"]] = arr
    return cfg, weights, buffers


def read_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileReadError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC):
        raise CorruptionError(f"{path}: file too short for a checkpoint")
    magic = raw[: len(CHECKPOINT_MAGIC)]
    if magic != CHECKPOINT_MAGIC:
        if magic[:6] == CHECKPOINT_MAGIC[:6]:
            raise VersionError(f"{path}: unsupported checkpoint version {magic[6:]!r}")
        raise FormatError(f"{path}: not a checkpoint (bad magic {magic!r})")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + _PREFIX.size:
        raise CorruptionError(f"{path}: truncated header prefix")
    head_len, head_crc = _PREFIX.unpack_from(raw, pos)
    pos += _PREFIX.size
    if pos + head_len > len(raw):
        raise CorruptionError(f"{path}: header length {head_len} runs past end of file")
    head = raw[pos : pos + head_len]
    if zlib.crc32(head) != head_crc:
        raise CorruptionError(f"{path}: header checksum mismatch")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: header is not valid JSON") from exc
    if not isinstance(header, dict):
        raise CorruptionError(f"{path}: header is not a JSON object")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported format_version {header.get('format_version')!r}")

    blob = memoryview(raw)[pos + head_len :]
    try:
        cfg, weights, buffers = _decode_tensors(header, blob, path)
    except CorruptionError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"{path}: malformed checkpoint header ({exc.__class__.__name__}: {exc})") from exc
    params = ModelParams(weights, buffers)
    try:
        check_params(params, cfg)
    except ParameterError as exc:
        raise CorruptionError(f"{path}: {exc}") from exc
    return Checkpoint(params, cfg, header.get("seed"), header.get("history_digest"), header.get("extra") or {})


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    ckpt = read_checkpoint(path)
    return ckpt.params, ckpt.config


# ---------------------------------------------------------------------------
# reports


def _sample_row(sample_id: str, c: Confusion, m: MetricTriple) -> dict:
    return {"id": sample_id, "acc": m.acc, "iou": m.iou, "dsc": m.dsc, "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn}


def build_report(history=None, evaluation=None, config: dict | None = None, extra: dict | None = None) -> dict:
    """JSON-ready report. ``history`` needs ``to_dict()``; ``evaluation`` needs ``rows``."""
    doc = {
        "report_version": REPORT_VERSION,
        "config": config or {},
        "epochs": [],
        "samples": [],
        "aggregates": None,
    }
    if history is not None:
        h = history.to_dict()
        doc["epochs"] = h.pop("epochs")
        doc["history"] = h
    if evaluation is not None and evaluation.rows:
        doc["samples"] = [_sample_row(r.id, r.confusion, r.metrics) for r in evaluation.rows]
        doc["aggregates"] = aggregates_from_rows(doc["samples"])
    if extra:
        doc["extra"] = extra
    return doc


def aggregates_from_rows(rows: list[dict]) -> dict:
    triples = [MetricTriple(r["acc"], r["iou"], r["dsc"]) for r in rows]
    confusions = [Confusion(r["tp"], r["tn"], r["fp"], r["fn"]) for r in rows]
    return {"macro": macro_average(triples).to_dict(), "micro": micro_average(confusions).to_dict()}


def write_report(history=None, evaluation=None, path=None, config: dict | None = None, extra: dict | None = None) -> dict:
    doc = build_report(history, evaluation, config, extra)
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return doc


def read_report(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FileReadError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: report is not valid JSON") from exc
    if doc.get("report_version") != REPORT_VERSION:
        raise VersionError(f"{path}: unsupported report_version {doc.get('report_version')!r}")
    return doc


# ---------------------------------------------------------------------------
# overlays


def render_overlay(img: np.ndarray, mask: np.ndarray, color=(1.0, 0.0, 0.0), alpha: float = 0.5) -> np.ndarray:
    """Blend ``color`` into wound pixels; everything else is copied unchanged."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    img = np.asarray(img)
    mask = np.asarray(mask)
    if img.shape[:2] != mask.shape:
        raise DataError(f"image {img.shape[:2]} and mask {mask.shape} differ")
    out = img.copy()
    sel = mask > 0
    if alpha == 1.0:
        out[sel] = np.asarray(color, dtype=img.dtype)
    elif alpha > 0.0:
        out[sel] = (1.0 - alpha) * img[sel] + alpha * np.asarray(color, dtype=np.float64)
    return out
