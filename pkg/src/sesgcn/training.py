"""Mini-batch ADAM training on the sequence-average joint error."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data.corpus import WindowedExample, stack_examples
from .data.split import WindowedDataset
from .errors import ConfigError, ContractViolation, NumericFault, TrainingDiverged
from .metrics import sequence_loss
from .model import SesGcnModel, model_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 256
    base_lr: float = 0.1
    decay_epochs: tuple[int, ...] = (5, 20, 30, 37)
    decay_factor: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None
    # Global gradient-norm clip; None trains without clipping.
    clip_norm: float | None = 10.0
    restore_best: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if not self.decay_factor > 0:
            raise ConfigError("decay_factor must be > 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 or null")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss_mm: float
    val_loss_mm: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss_mm: float
    best_state: dict[str, np.ndarray]
    final_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    final_state: dict[str, np.ndarray] = field(default_factory=dict)

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss_mm", "val_loss_mm", "lr"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss_mm), repr(r.val_loss_mm), repr(r.lr)])
    return buf.getvalue()


def to_model_layout(examples: Sequence[WindowedExample]) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``[N, 3, V, T]`` and targets ``[N, 3, V, K]`` (the model's layout)."""
    x, y = stack_examples(examples)
    return np.ascontiguousarray(x.transpose(0, 3, 2, 1)), np.ascontiguousarray(y.transpose(0, 3, 2, 1))


def evaluate_loss(model: SesGcnModel, X: np.ndarray, Y: np.ndarray, batch_size: int = 256) -> float:
    """Sequence loss (mm) over a whole set in eval mode, weighted by batch size."""
    total = 0.0
    with nx.no_grad():
        for i in range(0, len(X), batch_size):
            pred = model_forward(X[i : i + batch_size], model, training=False)
            n = len(pred.data)
            total += sequence_loss(pred, Y[i : i + batch_size], coord_axis=1).item() * n
    return total / len(X)


def train(model: SesGcnModel, dataset: WindowedDataset, cfg: TrainConfig) -> TrainResult:
    """Train ``model`` in place; returns the loss history and best-validation state.

    With ``cfg.restore_best`` the model ends holding the best-validation weights.
    """
    if not dataset.train or not dataset.validation:
        raise ContractViolation("training needs non-empty train and validation windows")
    X, Y = to_model_layout(dataset.train)
    Xv, Yv = to_model_layout(dataset.validation)
    n = len(X)
    bs = min(cfg.batch_size, n)
    params = model.parameters()
    state = nx.AdamState(
        learning_rate=cfg.base_lr,
        decay_schedule=nx.step_decay_schedule(cfg.decay_epochs, cfg.decay_factor),
    )
    rng = np.random.default_rng(cfg.seed)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good: Path | None = None
    history: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = -1
    best_state = model.state_dict()
    best_path = ckpt_dir / "best.sesg" if ckpt_dir else None

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = state.effective_lr()
        order = rng.permutation(n)
        total = 0.0
        model.train()
        for i in range(0, n, bs):
            idx = np.sort(order[i : i + bs])
            try:
                model.zero_grad()
                pred = model_forward(X[idx], model, training=True)
                loss = sequence_loss(pred, Y[idx], coord_axis=1)
                nx.backward(loss)
                if cfg.clip_norm is not None:
                    norm = nx.clip_grad_norm(params, cfg.clip_norm)
                    if not math.isfinite(norm):
                        raise NumericFault("clip_grad_norm", "non-finite gradient norm")
                nx.adam_step(state, params)
            except NumericFault as exc:
                model.eval()
                raise TrainingDiverged(epoch, str(last_good) if last_good else None) from exc
            total += loss.item() * len(idx)
        model.eval()
        train_loss = total / n
        val_loss = evaluate_loss(model, Xv, Yv)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDiverged(epoch, str(last_good) if last_good else None)
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        log.info("epoch %d  train %.3f mm  val %.3f mm  lr %.3g", epoch, train_loss, val_loss, lr)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = model.state_dict()
            if best_path:
                nx.save_checkpoint(best_path, best_state)
        if ckpt_dir:
            last_good = ckpt_dir / "last.sesg"
            nx.save_checkpoint(last_good, model.state_dict())
            (ckpt_dir / "history.csv").write_text(history_csv(history))

    final_state = model.state_dict()
    final_path = None
    if ckpt_dir:
        final_path = ckpt_dir / "final.sesg"
        model.save(final_path)
    if cfg.restore_best:
        model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_val, best_state, final_path, best_path, final_state)
