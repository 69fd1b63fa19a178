"""Two-stage training: expert pretraining, then guidance training.

Stage I fits one residual pathway on a single superclass. Stage II loads
both experts and fits the guidance gate on the fused prediction (experts
frozen by default). Both stages select the epoch with the lowest
validation loss, using a subject-disjoint holdout of the training subjects.
"""

from __future__ import annotations

import copy
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ChannelStats, Dataset, compute_stats, holdout_split, normalize
from .metrics import MetricsReport
from .model import (
    DEFAULT_GUIDANCE_WIDTHS,
    DEFAULT_PATHWAY_WIDTHS,
    FusionModel,
    Guidance,
    GuidanceConfig,
    Pathway,
    PathwayConfig,
    forward,
    fuse,
    guidance_forward,
    nll_loss,
    pathway_logits,
)
from .tensor import ShapeError, Tensor

STAGES = ("1-static", "1-dynamic", "2")


class IncompatibleCheckpoint(ValueError):
    """Expert checkpoints cannot be combined with each other or the data."""


# ---------------------------------------------------------------------------
# optimizer and scheduler


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kwargs)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update; a None gradient counts as zero."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class PlateauScheduler:
    current_lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-5
    threshold: float = 1e-6
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0

    def update(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise ValueError(f"validation loss must be finite, got {val_loss}")
        if val_loss < self.best_val_loss - self.threshold:
            self.best_val_loss = val_loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.current_lr = max(self.min_lr, self.current_lr * self.factor)
                self.epochs_since_improvement = 0
        return self.current_lr


def plateau_update(s: PlateauScheduler, val_loss: float) -> float:
    return s.update(val_loss)


# ---------------------------------------------------------------------------
# config and logging


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int | None = None  # None: 100 for Stage I, 50 for Stage II
    initial_lr: float = 1e-3
    seed: int = 42
    freeze_experts: bool = True
    val_fraction: float = 0.1
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-5
    pathway_widths: tuple = DEFAULT_PATHWAY_WIDTHS
    guidance_widths: tuple = DEFAULT_GUIDANCE_WIDTHS
    eval_batch_size: int = 256
    target_train_accuracy: float | None = None  # stop once reached (overfit checks)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm needs it)")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def epochs_for(self, stage: str) -> int:
        if self.epochs is not None:
            return self.epochs
        return 50 if stage == "2" else 100


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    train_accuracy: float = float("nan")

    def line(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.val_loss:.6f},{self.val_accuracy:.6f},{self.lr:.6g}"


@dataclass
class TrainResult:
    model: FusionModel
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def best_val_loss(self) -> float:
        return min(h.val_loss for h in self.history)


def _emit(log: Callable[[str], None] | None, text: str) -> None:
    if log is None:
        print(text, file=sys.stdout, flush=True)
    else:
        log(text)


# ---------------------------------------------------------------------------
# shared loop


def _batches(n: int, size: int, rng: np.random.Generator | None, drop_last: bool):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % size if drop_last else n
    for start in range(0, stop, size):
        yield order[start : start + size]


def _snapshot(parts: Sequence) -> list[np.ndarray]:
    out = []
    for part in parts:
        out += [t.data.copy() for t in part.parameters()]
        out += [b.copy() for _, b in part.named_buffers()]
    return out


def _restore(parts: Sequence, snap: list[np.ndarray]) -> None:
    it = iter(snap)
    for part in parts:
        for t in part.parameters():
            t.data[...] = next(it)
        for _, b in part.named_buffers():
            b[...] = next(it)


def _fit(
    params: list[Tensor],
    parts: Sequence,
    loss_fn: Callable[[np.ndarray, str], Tensor],
    score_fn: Callable[[np.ndarray], tuple[float, float]],
    n_train: int,
    cfg: TrainConfig,
    epochs: int,
    log: Callable[[str], None] | None,
    train_score_fn: Callable[[], float] | None = None,
) -> tuple[list[EpochLog], int]:
    """Minibatch Adam with plateau decay; restores the best-validation epoch.

    ``loss_fn(indices, mode)`` builds the loss graph for a training batch;
    ``score_fn(None)`` returns (val_loss, val_accuracy) in eval mode.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(params)
    sched = PlateauScheduler(cfg.initial_lr, cfg.factor, cfg.patience, cfg.min_lr)
    batch = min(cfg.batch_size, n_train)
    if batch < 2:
        raise ValueError(f"need at least 2 training windows, got {n_train}")

    val_loss, val_acc = score_fn(None)
    history = [EpochLog(0, val_loss, val_loss, val_acc, sched.current_lr)]
    _emit(log, history[0].line())
    best_loss, best_epoch, best = val_loss, 0, _snapshot(parts)

    for epoch in range(1, epochs + 1):
        lr = sched.current_lr
        total, count = 0.0, 0
        for idx in _batches(n_train, batch, rng, drop_last=True):
            for p in params:
                p.grad = None
            loss = loss_fn(idx, "train")
            T.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            total += loss.item() * len(idx)
            count += len(idx)
        val_loss, val_acc = score_fn(None)
        entry = EpochLog(epoch, total / count, val_loss, val_acc, lr)
        if train_score_fn is not None:
            entry.train_accuracy = train_score_fn()
        history.append(entry)
        _emit(log, entry.line())
        if val_loss < best_loss:
            best_loss, best_epoch, best = val_loss, epoch, _snapshot(parts)
        sched.update(val_loss)
        if cfg.target_train_accuracy is not None and entry.train_accuracy >= cfg.target_train_accuracy:
            break

    _restore(parts, best)
    return history, best_epoch


def _predict_probs(fn: Callable[[np.ndarray], Tensor], X: np.ndarray, batch: int) -> np.ndarray:
    chunks = [fn(X[s : s + batch]).data for s in range(0, len(X), batch)]
    return np.concatenate(chunks) if chunks else np.zeros((0, 0))


def _nll(probs: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(-np.log(probs[np.arange(len(y)), y] + 1e-12)))


# ---------------------------------------------------------------------------
# Stage I


def _prepare(data: Dataset, stats: ChannelStats | None) -> tuple[Dataset, ChannelStats]:
    if stats is None:
        stats = compute_stats(data)
    return normalize(data, stats), stats


def train_stage1(
    data: Dataset,
    which: str,
    cfg: TrainConfig | None = None,
    stats: ChannelStats | None = None,
    log: Callable[[str], None] | None = None,
    validation: Dataset | None = None,
) -> TrainResult:
    """Train one expert pathway on a single-superclass dataset.

    ``data`` is un-normalized; ``stats`` should come from the full training
    split so both experts and the gate share one input scaling. Without
    ``validation`` a subject holdout of ``cfg.val_fraction`` is used.
    """
    cfg = cfg or TrainConfig()
    if which not in ("static", "dynamic"):
        raise ValueError(f"which must be 'static' or 'dynamic', got {which!r}")
    if len(data) == 0:
        raise ValueError("cannot train an expert on an empty dataset")
    info = data.info
    labels = list(info.static_labels if which == "static" else info.dynamic_labels)
    foreign = set(np.unique(data.labels)) - set(labels)
    if foreign:
        raise ValueError(f"{which} expert data contains other-superclass labels {sorted(foreign)}")

    data, stats = _prepare(data, stats)
    if validation is None:
        train, val = holdout_split(data, cfg.val_fraction, cfg.seed)
    else:
        train, val = data, normalize(validation, stats)
    notes = []
    present = sorted(set(train.labels.tolist()))
    if len(present) < 2:
        notes.append(f"{which} expert trained on a single class {present}")
        _emit(log, f"# warning: {notes[-1]}")

    rng = np.random.default_rng(cfg.seed)
    pathway = Pathway.init(PathwayConfig.default(len(info.channels), len(labels), cfg.pathway_widths), rng)
    y_train = train.label_indices(labels)
    y_val = val.label_indices(labels)

    def loss_fn(idx, mode):
        probs = T.softmax(pathway_logits(train.X[idx], pathway, mode), axis=1)
        return nll_loss(probs, y_train[idx])

    def probs_of(X):
        return _predict_probs(lambda xb: T.softmax(pathway_logits(xb, pathway, "eval"), axis=1), X, cfg.eval_batch_size)

    def score_fn(_):
        probs = probs_of(val.X)
        return _nll(probs, y_val), float(np.mean(probs.argmax(axis=1) == y_val))

    def train_acc():
        return float(np.mean(probs_of(train.X).argmax(axis=1) == y_train))

    history, best_epoch = _fit(
        pathway.parameters(),
        [pathway],
        loss_fn,
        score_fn,
        len(train),
        cfg,
        cfg.epochs_for("1-" + which),
        log,
        train_acc if cfg.target_train_accuracy is not None else None,
    )
    model = FusionModel(
        static=pathway if which == "static" else None,
        dynamic=pathway if which == "dynamic" else None,
        guidance=None,
        static_labels=list(info.static_labels),
        dynamic_labels=list(info.dynamic_labels),
        in_channels=len(info.channels),
        window_len=data.X.shape[2],
        dataset=info.name,
        norm_mean=stats.mean,
        norm_std=stats.std,
    )
    return TrainResult(model, history, best_epoch, notes)


# ---------------------------------------------------------------------------
# Stage II


def check_compatible(static_ck: FusionModel, dynamic_ck: FusionModel, data: Dataset | None = None) -> None:
    if static_ck.static is None:
        raise IncompatibleCheckpoint("static checkpoint holds no static pathway")
    if dynamic_ck.dynamic is None:
        raise IncompatibleCheckpoint("dynamic checkpoint holds no dynamic pathway")
    for attr in ("dataset", "in_channels", "window_len", "static_labels", "dynamic_labels"):
        a, b = getattr(static_ck, attr), getattr(dynamic_ck, attr)
        if a != b:
            raise IncompatibleCheckpoint(f"experts disagree on {attr}: {a!r} vs {b!r}")
    for attr in ("norm_mean", "norm_std"):
        a, b = getattr(static_ck, attr), getattr(dynamic_ck, attr)
        if a is None or b is None or a.shape != b.shape or not np.array_equal(a, b):
            raise IncompatibleCheckpoint(f"experts were trained with different {attr}")
    if data is not None:
        info = data.info
        if info.name != static_ck.dataset:
            raise IncompatibleCheckpoint(f"experts were trained on {static_ck.dataset}, data is {info.name}")
        if data.X.shape[1:] != (static_ck.in_channels, static_ck.window_len):
            raise IncompatibleCheckpoint(
                f"data windows {data.X.shape[1:]} do not match experts "
                f"({static_ck.in_channels}, {static_ck.window_len})"
            )


def train_stage2(
    data: Dataset,
    static_ck: FusionModel,
    dynamic_ck: FusionModel,
    cfg: TrainConfig | None = None,
    log: Callable[[str], None] | None = None,
    validation: Dataset | None = None,
) -> TrainResult:
    """Train the guidance gate on fused predictions over all classes."""
    cfg = cfg or TrainConfig()
    check_compatible(static_ck, dynamic_ck, data)
    stats = ChannelStats(static_ck.norm_mean, static_ck.norm_std)
    data = normalize(data, stats)
    if validation is None:
        train, val = holdout_split(data, cfg.val_fraction, cfg.seed)
    else:
        train, val = data, normalize(validation, stats)

    static = copy.deepcopy(static_ck.static)
    dynamic = copy.deepcopy(dynamic_ck.dynamic)
    rng = np.random.default_rng(cfg.seed)
    guidance = Guidance.init(GuidanceConfig.default(static_ck.in_channels, cfg.guidance_widths), rng)
    model = FusionModel(
        static,
        dynamic,
        guidance,
        list(static_ck.static_labels),
        list(static_ck.dynamic_labels),
        static_ck.in_channels,
        static_ck.window_len,
        static_ck.dataset,
        stats.mean,
        stats.std,
    )
    order = model.class_order
    y_train = train.label_indices(order)
    y_val = val.label_indices(order)

    if cfg.freeze_experts:
        static.set_trainable(False)
        dynamic.set_trainable(False)
        params = guidance.parameters()
        parts = [guidance]

        # frozen experts run in eval mode, so their outputs are fixed per window
        def expert_probs(X):
            ys = _predict_probs(lambda xb: T.softmax(pathway_logits(xb, static, "eval"), axis=1), X, cfg.eval_batch_size)
            yd = _predict_probs(lambda xb: T.softmax(pathway_logits(xb, dynamic, "eval"), axis=1), X, cfg.eval_batch_size)
            return ys, yd

        ys_train, yd_train = expert_probs(train.X)
        ys_val, yd_val = expert_probs(val.X)

        def loss_fn(idx, mode):
            g = guidance_forward(train.X[idx], guidance, mode)
            fused = fuse(Tensor(ys_train[idx]), Tensor(yd_train[idx]), g, order)
            return nll_loss(fused, y_train[idx])

        def score_fn(_):
            g = _predict_probs(lambda xb: guidance_forward(xb, guidance, "eval"), val.X, cfg.eval_batch_size)
            fused = np.concatenate([g * ys_val, (1 - g) * yd_val], axis=1)
            return _nll(fused, y_val), float(np.mean(fused.argmax(axis=1) == y_val))

    else:
        params = static.parameters() + dynamic.parameters() + guidance.parameters()
        parts = [static, dynamic, guidance]

        def loss_fn(idx, mode):
            return nll_loss(forward(train.X[idx], model, mode).probs, y_train[idx])

        def score_fn(_):
            probs = _predict_probs(lambda xb: forward(xb, model, "eval").probs, val.X, cfg.eval_batch_size)
            return _nll(probs, y_val), float(np.mean(probs.argmax(axis=1) == y_val))

    history, best_epoch = _fit(params, parts, loss_fn, score_fn, len(train), cfg, cfg.epochs_for("2"), log)
    static.set_trainable(True)
    dynamic.set_trainable(True)
    return TrainResult(model, history, best_epoch)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: FusionModel, test: Dataset, batch_size: int = 256, normalized: bool = False) -> MetricsReport:
    """Fused-model metrics on a raw (un-normalized) dataset."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if not normalized and model.norm_mean is not None:
        test = normalize(test, ChannelStats(model.norm_mean, model.norm_std))
    order = model.class_order
    truths = test.label_indices(order)
    probs = _predict_probs(lambda xb: forward(xb, model, "eval").probs, test.X, batch_size)
    return MetricsReport.from_predictions(probs.argmax(axis=1), truths, order)


def gate_values(model: FusionModel, test: Dataset, batch_size: int = 256) -> np.ndarray:
    """g_x for every window of a raw dataset, shape [N]."""
    if model.norm_mean is not None:
        test = normalize(test, ChannelStats(model.norm_mean, model.norm_std))
    g = _predict_probs(lambda xb: guidance_forward(xb, model.guidance, "eval"), test.X, batch_size)
    return g[:, 0]


def train_pipeline(
    train_data: Dataset,
    cfg: TrainConfig | None = None,
    stage2_cfg: TrainConfig | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[FusionModel, dict[str, TrainResult]]:
    """Stage I for both experts then Stage II, sharing one normalization."""
    from .data import partition_superclass

    cfg = cfg or TrainConfig()
    stats = compute_stats(train_data)
    s_static, s_dynamic = partition_superclass(train_data)
    r_static = train_stage1(s_static, "static", cfg, stats, log)
    r_dynamic = train_stage1(s_dynamic, "dynamic", cfg, stats, log)
    r_full = train_stage2(train_data, r_static.model, r_dynamic.model, stage2_cfg or cfg, log)
    return r_full.model, {"1-static": r_static, "1-dynamic": r_dynamic, "2": r_full}
