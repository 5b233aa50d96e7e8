"""Supervised training, window sampling, sliding-window evaluation and metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import stats
from torch.nn import functional as F

from .errors import ConfigError, TrainingDivergedError
from .model import BrainTransformer
from .pretrain import MaskedTokenModel, pretrain_step

log = logging.getLogger(__name__)

TASKS = ("binary", "regression")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 4
    epochs: int = 10
    T: int = 256
    seed: int = 0
    task_kind: str = "binary"
    pos_weight: float | None = None
    mask_ratio: float = 0.5
    eval_T: int | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.task_kind not in TASKS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class MetricsReport:
    task_kind: str
    n_samples: int
    split: str = ""
    acc: float | None = None
    auc: float | None = None
    f1: float | None = None
    mse: float | None = None
    mae: float | None = None
    rho: float | None = None
    extra: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "extra"}
        row.update(self.extra)
        return row

    @property
    def headline(self) -> float:
        """AUC for classification, Pearson rho for regression."""
        return self.auc if self.task_kind == "binary" else self.rho


# -- windows -------------------------------------------------------------------

def _frames(seq):
    data = getattr(seq, "data", seq)
    return torch.as_tensor(np.asarray(data) if not torch.is_tensor(data) else data)


def sample_window(seq, T: int, rng) -> torch.Tensor:
    """Uniform random contiguous window of ``T`` frames (the whole sequence if shorter).

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    frames = _frames(seq)
    total = frames.shape[0]
    if total <= T:
        return frames
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    start = int(rng.integers(0, total - T + 1))
    return frames[start:start + T]


def window_starts(total: int, T: int) -> list[int]:
    """Non-overlapping windows from frame 0, plus an end-anchored tail for any remainder."""
    if total <= T:
        return [0]
    starts = list(range(0, total - T + 1, T))
    if starts[-1] + T < total:
        starts.append(total - T)
    return starts


@torch.no_grad()
def sliding_eval(model, seq, T: int, batch_size: int | None = None) -> float:
    """Average model output over :func:`window_starts` windows."""
    frames = _frames(seq)
    starts = window_starts(frames.shape[0], T)
    width = min(T, frames.shape[0])
    windows = torch.stack([frames[s:s + width] for s in starts])
    if hasattr(model, "eval"):
        model.eval()
    step = batch_size or len(starts)
    outs = [model(windows[i:i + step]).reshape(-1) for i in range(0, len(starts), step)]
    return float(torch.cat(outs).double().mean())


# -- metrics -------------------------------------------------------------------

def auc_score(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties counted as one half; ``None`` for single-class labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(preds, labels, task_kind: str, split: str = "") -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size < 1:
        raise ValueError("no samples to score")
    report = MetricsReport(task_kind, int(preds.size), split)
    if task_kind == "binary":
        hard = preds > 0.0
        truth = labels > 0.5
        report.acc = float((hard == truth).mean())
        report.auc = auc_score(preds, truth)
        tp = int((hard & truth).sum())
        denom = int(hard.sum()) + int(truth.sum())
        report.f1 = 2.0 * tp / denom if denom else 0.0
    elif task_kind == "regression":
        err = preds - labels
        report.mse = float(np.mean(err ** 2))
        report.mae = float(np.mean(np.abs(err)))
        if preds.std() > 0 and labels.std() > 0:
            report.rho = float(np.clip(np.corrcoef(preds, labels)[0, 1], -1.0, 1.0))
    else:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    return report


def supervised_loss(preds: torch.Tensor, targets: torch.Tensor, task_kind: str,
                    pos_weight: float | None = None) -> torch.Tensor:
    """Logit binary cross-entropy (optionally positive-weighted) or L1 for regression."""
    targets = targets.to(preds.dtype)
    if task_kind == "binary":
        pw = None if pos_weight is None else torch.tensor(pos_weight, dtype=preds.dtype)
        return F.binary_cross_entropy_with_logits(preds, targets, pos_weight=pw)
    return F.l1_loss(preds, targets)


# -- loops ---------------------------------------------------------------------

def _cosine(optimizer, total_steps: int):
    total_steps = max(total_steps, 1)
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    )


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _stack_windows(seqs, idx, T, rng) -> torch.Tensor:
    windows = [sample_window(seqs[i], T, rng) for i in idx]
    width = min(w.shape[0] for w in windows)
    return torch.stack([w[:width] for w in windows]).float()


def evaluate(model, data: Sequence, T: int, task_kind: str, split: str = "") -> MetricsReport:
    """Sliding-window predictions for ``(sequence, target)`` pairs, scored."""
    preds = [sliding_eval(model, seq, T) for seq, _ in data]
    return compute_metrics(preds, [y for _, y in data], task_kind, split)


def train(model: BrainTransformer, train_data: Sequence, cfg: TrainConfig,
          val_data: Sequence | None = None) -> tuple[BrainTransformer, list[dict]]:
    """Train on ``(sequence, target)`` pairs with AdamW and cosine decay.

    Returns the final-epoch model and one history row per epoch (train loss
    plus validation metrics when ``val_data`` is given).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    seqs = [s for s, _ in train_data]
    targets = torch.tensor([float(y) for _, y in train_data])
    steps_per_epoch = math.ceil(len(seqs) / cfg.batch_size)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = _cosine(opt, steps_per_epoch * cfg.epochs)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for idx in _batches(len(seqs), cfg.batch_size, rng):
            batch = _stack_windows(seqs, idx, cfg.T, rng)
            loss = supervised_loss(model(batch), targets[idx], cfg.task_kind, cfg.pos_weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, lr={sched.get_last_lr()[0]:.3g}, batch={idx.tolist()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if val_data:
            report = evaluate(model, val_data, cfg.eval_T or cfg.T, cfg.task_kind, "val")
            row.update({f"val_{k}": v for k, v in report.as_row().items() if k not in ("task_kind", "split")})
        log.info("epoch %d: %s", epoch, row)
        history.append(row)
    model.eval()
    return model, history


def pretrain(mtm: MaskedTokenModel, sequences: Sequence, cfg: TrainConfig) -> list[float]:
    """Masked token modeling over unlabeled sequences; returns per-step losses."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(sequences) / cfg.batch_size)
    opt = torch.optim.AdamW(mtm.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = _cosine(opt, steps_per_epoch * cfg.epochs)
    losses = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(len(sequences), cfg.batch_size, rng):
            batch = _stack_windows(sequences, idx, cfg.T, rng)
            losses.append(pretrain_step(mtm, batch, cfg.mask_ratio, opt, seed=cfg.seed * 7919 + step,
                                        scheduler=sched))
            step += 1
    mtm.eval()
    return losses
