"""Optimisation: AdamW, learning-rate schedules, metrics and the two training
workflows (pixel-set pretraining, per-pixel dense finetuning)."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import config_hash
from .data import Batch, Dataset, collate, temporal_dropout
from .errors import ConfigError, DataError, NumericalError
from .heads import (
    IGNORE_LABEL,
    ClassifierParams,
    DenseHeadParams,
    cosine_logits,
    cosine_softmax_loss,
    dense_head,
    focal_ce_loss,
    mil_pool,
    projector,
    temporal_pool,
)
from .model import Backbone, ExchangerConfig

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune-scratch", "finetune-pretrained")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 2e-4
    weight_decay: float = 0.005
    schedule: str = "step"
    step_fractions: tuple[float, float] = (0.7, 0.9)
    step_factor: float = 10.0
    poly_power: float = 0.9
    dropout_rates: tuple[float, float] = (0.2, 0.4)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    focal_gamma: float = 2.0
    seed: int = 0
    mode: str = "pretrain"

    def validate(self) -> None:
        if self.lr0 < 0 or not math.isfinite(self.lr0):
            raise ConfigError(f"lr0 must be finite and >= 0, got {self.lr0}")
        lo, hi = self.step_fractions
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError(f"step fractions must be strictly increasing in (0, 1), got {self.step_fractions}")
        if self.schedule not in ("step", "poly"):
            raise ConfigError(f"schedule must be 'step' or 'poly', got {self.schedule!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.dropout_rates[0] <= self.dropout_rates[1] < 1.0:
            raise ConfigError(f"dropout rates must satisfy 0 <= low <= high < 1, got {self.dropout_rates}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        for key in ("step_fractions", "dropout_rates", "betas"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


# ---------------------------------------------------------------------------
# optimiser and schedules
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * p``
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}; step aborted")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ConfigError(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p
        p -= (lr * update).astype(p.dtype)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate at ``step`` of ``total_steps`` (``0 <= step < total_steps``)."""
    if cfg.schedule == "poly":
        return cfg.lr0 * (1.0 - step / total_steps) ** cfg.poly_power
    first, second = cfg.step_fractions
    if step >= second * total_steps - 1e-9:
        return cfg.lr0 / cfg.step_factor ** 2
    if step >= first * total_steps - 1e-9:
        return cfg.lr0 / cfg.step_factor
    return cfg.lr0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def confusion_matrix(truth: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    truth = np.asarray(truth).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    keep = truth != IGNORE_LABEL
    return np.bincount(truth[keep] * k + pred[keep], minlength=k * k).reshape(k, k)


def compute_metrics(confusion: np.ndarray) -> dict:
    """Macro precision/recall/F1 and mIoU, all in percent.

    Rows are ground truth, columns predictions. Classes absent from both
    truth and prediction are left out of every macro average; a zero
    denominator otherwise scores 0.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    if np.any(cm < 0):
        raise DataError("confusion counts must be non-negative")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = (tp + fp + fn) > 0

    def ratio(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    f1 = ratio(2 * precision * recall, precision + recall)
    iou = ratio(tp, tp + fp + fn)

    def macro(x):
        return float(100.0 * x[present].mean()) if present.any() else 0.0

    total = cm.sum()
    return {
        "precision": macro(precision),
        "recall": macro(recall),
        "f1": macro(f1),
        "miou": macro(iou),
        "accuracy": float(100.0 * tp.sum() / total) if total else 0.0,
        "iou_per_class": [float(100.0 * x) for x in iou],
    }


@dataclass
class RunMetrics:
    """Per-epoch records ``(epoch, split, metric, value)``; metric values in percent."""

    records: list[tuple[int, str, str, float]] = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.records.append((epoch, split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[float]:
        return [v for (e, s, m, v) in self.records if s == split and m == metric]

    def final(self, split: str, metric: str) -> float:
        values = self.series(split, metric)
        if not values:
            raise KeyError(f"no {split}/{metric} records")
        return values[-1]

    def to_csv(self, header_comment: str | None = None) -> str:
        lines = [f"# {header_comment}"] if header_comment else []
        lines.append("epoch,split,metric,value")
        lines += [f"{e},{s},{m},{v!r}" for (e, s, m, v) in self.records]
        return "\n".join(lines) + "\n"


def epochs_to_reach(values: list[float], target: float) -> int | None:
    """1-based index of the first epoch whose value reaches ``target``."""
    for i, v in enumerate(values, start=1):
        if v >= target:
            return i
    return None


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


@dataclass
class PixelSetClassifier:
    backbone: Backbone
    head: ClassifierParams

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": t for k, t in self.backbone.named_parameters().items()}
        out.update({f"head.{k}": t for k, t in self.head.named().items()})
        return out

    def features(self, batch: Batch) -> Tensor:
        # B x T x C x N  ->  B x N x T x C; every pixel shares its parcel's time axis
        x = np.ascontiguousarray(np.transpose(batch.values, (0, 3, 1, 2)))
        mask = batch.mask[:, None, :]
        encoded = self.backbone.encode(x, batch.timestamps[:, None, :], mask)
        per_pixel = temporal_pool(encoded, mask)
        return mil_pool(per_pixel)

    def logits(self, batch: Batch) -> Tensor:
        return cosine_logits(projector(self.features(batch), self.head), self.head)

    def loss(self, batch: Batch) -> Tensor:
        return cosine_softmax_loss(projector(self.features(batch), self.head), batch.labels, self.head)


@dataclass
class DenseSegmenter:
    backbone: Backbone
    head: DenseHeadParams

    def parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": t for k, t in self.backbone.named_parameters().items()}
        out.update({f"head.{k}": t for k, t in self.head.named().items()})
        return out

    def logits(self, batch: Batch) -> Tensor:
        b, t, c, h, w = batch.values.shape
        x = np.ascontiguousarray(np.transpose(batch.values.reshape(b, t, c, h * w), (0, 3, 1, 2)))
        mask = batch.mask[:, None, :]
        encoded = self.backbone.encode(x, batch.timestamps[:, None, :], mask)
        return dense_head(temporal_pool(encoded, mask), self.head)  # B x HW x K

    def loss(self, batch: Batch, gamma: float) -> Tensor:
        labels = batch.labels.reshape(batch.labels.shape[0], -1)
        return focal_ce_loss(self.logits(batch), labels, gamma)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    metrics: RunMetrics
    manifest: dict

    def arrays(self) -> dict[str, np.ndarray]:
        return _arrays(self.model.parameters())


def _batches(dataset: Dataset, order: np.ndarray, batch_size: int, rng, rates):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        samples = [dataset[i] for i in idx]
        if rng is not None and rates[1] > 0:
            samples = [temporal_dropout(s, rates[0], rates[1], rng) for s in samples]
        yield collate(samples)


def _fit(model, loss_fn, evaluate, train: Dataset, cfg: TrainConfig, rng: np.random.Generator,
         manifest: dict) -> TrainResult:
    params = {k: t for k, t in model.parameters().items() if t.requires_grad}
    state = AdamState()
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    metrics = RunMetrics()
    started = time.perf_counter()
    last_good = _arrays(params)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for batch in _batches(train, order, cfg.batch_size, rng, cfg.dropout_rates):
            ad.zero_grad(params.values())
            loss = loss_fn(batch)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"loss became non-finite at epoch {epoch}", last_good)
            ad.backward(loss)
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            try:
                adamw_step({k: t.data for k, t in params.items()}, grads, state,
                           lr_at(step, total, cfg), cfg.betas, cfg.eps, cfg.weight_decay)
            except NumericalError as exc:
                raise NumericalError(str(exc), last_good) from None
            losses.append(loss.item())
            step += 1
        metrics.add(epoch, "train", "loss", float(np.mean(losses)))
        for split, values in evaluate().items():
            for name, value in values.items():
                metrics.add(epoch, split, name, value)
        last_good = _arrays(params)
        log.info("epoch %d: %s", epoch, {m: v for (e, s, m, v) in metrics.records if e == epoch})
    metrics.wall_clock = time.perf_counter() - started
    return TrainResult(model, metrics, manifest)


def _dataset_check(ds: Dataset, kind: str, what: str) -> None:
    if ds.kind != kind:
        raise DataError(f"{what} needs a {kind} dataset, got {ds.kind}")
    if len(ds) == 0:
        raise DataError(f"{what}: dataset is empty")


def predict_pixelset(model: PixelSetClassifier, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for start in range(0, len(ds), batch_size):
            batch = collate(ds.samples[start:start + batch_size])
            preds.append(model.logits(batch).data.argmax(axis=-1))
    return np.concatenate(preds)


def evaluate_pixelset(model: PixelSetClassifier, ds: Dataset, batch_size: int = 64) -> dict:
    truth = np.array([s.label for s in ds.samples])
    k = model.head.prototypes.shape[0]
    out = compute_metrics(confusion_matrix(truth, predict_pixelset(model, ds, batch_size), k))
    out.pop("iou_per_class")
    return out


def evaluate_grid(model: DenseSegmenter, ds: Dataset, gamma: float, batch_size: int = 4) -> dict:
    k = model.head.weight.shape[1]
    cm = np.zeros((k, k), dtype=np.int64)
    losses = []
    with ad.no_grad():
        for start in range(0, len(ds), batch_size):
            batch = collate(ds.samples[start:start + batch_size])
            logits = model.logits(batch)
            labels = batch.labels.reshape(batch.labels.shape[0], -1)
            losses.append(focal_ce_loss(logits, labels, gamma).item())
            cm += confusion_matrix(labels, logits.data.argmax(axis=-1), k)
    out = compute_metrics(cm)
    out.pop("iou_per_class")
    out["loss"] = float(np.mean(losses))
    return out


def _manifest(task: str, model_cfg: ExchangerConfig, cfg: TrainConfig, class_names: list[str], **extra) -> dict:
    return {
        "task": task,
        "config_hash": config_hash(model_cfg.to_dict(), cfg.to_dict()),
        "model": model_cfg.to_dict(),
        "train": cfg.to_dict(),
        "stages": model_cfg.stages,
        "class_names": list(class_names),
        **extra,
    }


def build_pixelset_classifier(model_cfg: ExchangerConfig, num_classes: int, seed: int) -> PixelSetClassifier:
    backbone = Backbone.init(model_cfg, np.random.default_rng([seed, 0]))
    head = ClassifierParams.init(model_cfg.d, num_classes, np.random.default_rng([seed, 1]))
    return PixelSetClassifier(backbone, head)


def run_pretrain(train: Dataset, val: Dataset | None, model_cfg: ExchangerConfig, cfg: TrainConfig) -> TrainResult:
    """Train backbone + projector + cosine classifier on pixel sets."""
    cfg.validate()
    _dataset_check(train, "pixelset", "run_pretrain")
    model_cfg.in_channels = train[0].values.shape[1]
    model = build_pixelset_classifier(model_cfg, train.num_classes, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])

    def evaluate():
        return {"val": evaluate_pixelset(model, val)} if val is not None and len(val) else {}

    manifest = _manifest("pretrain", model_cfg, cfg, train.class_names,
                         groups={"backbone": "backbone.", "head": "head."})
    return _fit(model, model.loss, evaluate, train, cfg, rng, manifest)


def build_segmenter(model_cfg: ExchangerConfig, num_classes: int, seed: int,
                    backbone_arrays: dict[str, np.ndarray] | None = None) -> DenseSegmenter:
    if backbone_arrays is None:
        backbone = Backbone.init(model_cfg, np.random.default_rng([seed, 0]))
    else:
        backbone = Backbone.from_arrays(model_cfg, backbone_arrays)
    head = DenseHeadParams.init(model_cfg.d, num_classes, np.random.default_rng([seed, 1]))
    return DenseSegmenter(backbone, head)


def backbone_arrays_from(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Select ``backbone.*`` entries of a checkpoint and strip the prefix."""
    return {k[len("backbone."):]: v for k, v in arrays.items() if k.startswith("backbone.")}


def run_finetune(train: Dataset, val: Dataset | None, model_cfg: ExchangerConfig, cfg: TrainConfig,
                 init: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Per-pixel dense training; ``init`` is a pretrained checkpoint's arrays or ``None`` for scratch.

    Only the backbone is transferred; the dense head is drawn from the same
    seed in both cases so the two inits differ in the backbone alone.
    """
    cfg.validate()
    _dataset_check(train, "grid", "run_finetune")
    model_cfg.in_channels = train[0].values.shape[1]
    model = build_segmenter(model_cfg, train.num_classes, cfg.seed,
                            None if init is None else backbone_arrays_from(init))
    rng = np.random.default_rng([cfg.seed, 2])

    def evaluate():
        return {"val": evaluate_grid(model, val, cfg.focal_gamma)} if val is not None and len(val) else {}

    manifest = _manifest("finetune", model_cfg, cfg, train.class_names,
                         init="scratch" if init is None else "pretrained",
                         groups={"backbone": "backbone.", "head": "head."})
    return _fit(model, lambda b: model.loss(b, cfg.focal_gamma), evaluate, train, cfg, rng, manifest)


def model_from_checkpoint(manifest: dict, arrays: dict[str, np.ndarray]):
    """Rebuild a ``PixelSetClassifier`` or ``DenseSegmenter`` from a saved checkpoint."""
    model_cfg = ExchangerConfig.from_dict(manifest["model"])
    backbone = Backbone.from_arrays(model_cfg, backbone_arrays_from(arrays))
    head = {k[len("head."):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("head.")}
    try:
        if manifest.get("task") == "pretrain":
            return PixelSetClassifier(backbone, ClassifierParams(**head))
        if manifest.get("task") == "finetune":
            return DenseSegmenter(backbone, DenseHeadParams(**head))
    except TypeError as exc:
        raise ConfigError(f"checkpoint head parameters do not match its task: {exc}") from None
    raise ConfigError(f"unknown checkpoint task {manifest.get('task')!r}")
