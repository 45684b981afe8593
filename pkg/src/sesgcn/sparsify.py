"""Teacher-student sparsification of the adjacency factors.

A dense ``sts_dw`` teacher is trained, each adjacency factor ``A`` is turned
into a binary mask ``|tanh(A)| >= eps``, and a fresh ``ses`` student with those
frozen masks is trained from scratch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.split import WindowedDataset
from .errors import ConfigError, ContractViolation, SchemaError
from .model import ModelConfig, SesGcnModel, count_parameters
from .training import TrainConfig, TrainResult, history_csv, train
from . import numerics as nx

log = logging.getLogger(__name__)

MASK_FORMAT = "sesgcn-masks"


@dataclass(frozen=True)
class SparsifyConfig:
    """Either a fixed ``epsilon`` or a ``target_sparsity`` used to calibrate it.

    When ``target_sparsity`` is set it takes precedence; ``per_matrix``
    calibrates one threshold per adjacency factor instead of one global value.
    """

    epsilon: float | None = None
    target_sparsity: float | None = 0.30
    per_matrix: bool = True

    def __post_init__(self):
        if self.epsilon is not None and not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.target_sparsity is not None and not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError(f"target_sparsity must lie in [0, 1), got {self.target_sparsity}")
        if self.epsilon is None and self.target_sparsity is None:
            raise ConfigError("set epsilon or target_sparsity")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SparsifyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sparsify config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class MaskPair:
    M_s: np.ndarray
    M_t: np.ndarray
    epsilon_s: float
    epsilon_t: float
    teacher_sha256: str = ""

    def __post_init__(self):
        for name in ("M_s", "M_t"):
            M = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isin(M, (0.0, 1.0)).all():
                raise ContractViolation(f"{name} has entries outside {{0, 1}}")
            object.__setattr__(self, name, M)

    def sparsity(self) -> tuple[float, float]:
        """Fraction of zero entries in ``M_s`` and ``M_t``."""
        return float(1.0 - self.M_s.mean()), float(1.0 - self.M_t.mean())


def quantile_threshold(values: np.ndarray, q: float) -> float:
    """Smallest threshold pruning ``round(q * n)`` of ``values`` under a ``>=`` keep rule.

    Entries tied with the threshold are kept, so ties can only lower the
    pruned fraction.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    k = int(round(q * v.size))
    if k <= 0:
        return float(v[0])
    return float(v[min(k, v.size - 1)]) if k < v.size else float(np.nextafter(v[-1], np.inf))


def mask_from_threshold(A: np.ndarray, eps: float) -> np.ndarray:
    return (np.abs(np.tanh(A)) >= eps).astype(np.float64)


def derive_masks(teacher: SesGcnModel, cfg: SparsifyConfig, teacher_sha256: str = "") -> list[MaskPair]:
    """Per-layer masks ``|tanh(A)| >= eps`` for both adjacency factors of a trained teacher."""
    if teacher.config.variant != "sts_dw":
        raise ContractViolation(f"teacher must be an sts_dw model, got variant {teacher.config.variant!r}")
    L = teacher.config.n_gcn_layers
    factors = [(teacher.params[f"gcn{l}.A_s"].data, teacher.params[f"gcn{l}.A_t"].data) for l in range(L)]
    if cfg.target_sparsity is None:
        eps_of = lambda A: cfg.epsilon  # noqa: E731
    elif cfg.per_matrix:
        eps_of = lambda A: quantile_threshold(np.abs(np.tanh(A)), cfg.target_sparsity)  # noqa: E731
    else:
        pooled = np.concatenate([np.abs(np.tanh(A)).reshape(-1) for pair in factors for A in pair])
        eps_global = quantile_threshold(pooled, cfg.target_sparsity)
        eps_of = lambda A: eps_global  # noqa: E731
    masks = []
    for A_s, A_t in factors:
        e_s, e_t = eps_of(A_s), eps_of(A_t)
        masks.append(MaskPair(mask_from_threshold(A_s, e_s), mask_from_threshold(A_t, e_t), e_s, e_t, teacher_sha256))
    return masks


def build_student(config: ModelConfig, masks: Sequence[MaskPair], seed: int) -> SesGcnModel:
    """Fresh ``ses`` model with frozen masks; masked entries start and stay at zero."""
    if len(masks) != config.n_gcn_layers:
        raise ContractViolation(f"{len(masks)} mask pairs for {config.n_gcn_layers} layers")
    cfg = config if config.variant == "ses" else config.replace(variant="ses")
    return SesGcnModel(cfg, seed=seed, masks=[(m.M_s, m.M_t) for m in masks])


# ---------------------------------------------------------------------------
# mask files


def rle_encode(bits: np.ndarray) -> list[int]:
    """Run lengths of a flattened 0/1 array, alternating zeros and ones, zeros first."""
    flat = np.asarray(bits).reshape(-1).astype(np.int8)
    runs = []
    current, count = 0, 0
    for b in flat:
        if b == current:
            count += 1
        else:
            runs.append(count)
            current, count = int(b), 1
    runs.append(count)
    return runs


def rle_decode(runs: Sequence[int], shape: Sequence[int]) -> np.ndarray:
    size = int(np.prod(shape))
    if any(r < 0 for r in runs) or sum(runs) != size:
        raise SchemaError(f"run lengths sum to {sum(runs)}, expected {size}")
    values = np.repeat(np.arange(len(runs)) % 2, runs)
    return values.astype(np.float64).reshape(shape)


def masks_to_json(masks: Sequence[MaskPair]) -> dict:
    layers = []
    for m in masks:
        layers.append({
            name: {"shape": list(M.shape), "epsilon": eps, "rle": rle_encode(M)}
            for name, M, eps in (("M_s", m.M_s, m.epsilon_s), ("M_t", m.M_t, m.epsilon_t))
        })
    return {
        "format": MASK_FORMAT,
        "version": 1,
        "teacher_sha256": masks[0].teacher_sha256 if masks else "",
        "layers": layers,
    }


def masks_from_json(d: dict) -> list[MaskPair]:
    if d.get("format") != MASK_FORMAT or d.get("version") != 1:
        raise SchemaError("not a version-1 mask file")
    out = []
    for i, layer in enumerate(d["layers"]):
        try:
            Ms = rle_decode(layer["M_s"]["rle"], layer["M_s"]["shape"])
            Mt = rle_decode(layer["M_t"]["rle"], layer["M_t"]["shape"])
            out.append(MaskPair(Ms, Mt, float(layer["M_s"]["epsilon"]), float(layer["M_t"]["epsilon"]), d.get("teacher_sha256", "")))
        except KeyError as exc:
            raise SchemaError(f"mask layer {i} is missing {exc}") from None
    return out


def save_masks(path: str | Path, masks: Sequence[MaskPair]) -> None:
    Path(path).write_text(json.dumps(masks_to_json(masks)) + "\n")


def load_masks(path: str | Path) -> list[MaskPair]:
    return masks_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class SparsifyResult:
    teacher: SesGcnModel
    student: SesGcnModel
    masks: list[MaskPair]
    teacher_run: TrainResult
    student_run: TrainResult
    report: dict


def _never_improved(run: TrainResult) -> bool:
    vals = [r.val_loss_mm for r in run.history]
    return len(vals) > 1 and min(vals[1:]) >= vals[0]


def teacher_student_train(
    dataset: WindowedDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    sparsify_cfg: SparsifyConfig,
    out_dir: str | Path | None = None,
) -> SparsifyResult:
    """Train an ``sts_dw`` teacher, derive masks, train a masked student from scratch.

    The student uses seed ``train_cfg.seed + 1`` for its initial weights.
    """
    if not dataset.validation:
        raise ContractViolation("teacher-student training needs a validation split")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    def sub_cfg(name: str) -> TrainConfig:
        d = train_cfg.to_dict()
        d["checkpoint_dir"] = str(out / f"{name}_ckpt") if out else None
        return TrainConfig.from_dict(d)

    teacher = SesGcnModel(model_cfg.replace(variant="sts_dw"), seed=train_cfg.seed)
    log.info("training teacher")
    t_run = train(teacher, dataset, sub_cfg("teacher"))
    digest = nx.checkpoint_digest(teacher.state_dict())
    if out:
        digest = teacher.save(out / "teacher.sesg")
        (out / "teacher_history.csv").write_text(history_csv(t_run.history))

    masks = derive_masks(teacher, sparsify_cfg, digest)
    if out:
        save_masks(out / "masks.json", masks)

    student = build_student(model_cfg, masks, seed=train_cfg.seed + 1)
    log.info("training student")
    s_run = train(student, dataset, sub_cfg("student"))
    if out:
        student.save(out / "student.sesg")
        (out / "student_history.csv").write_text(history_csv(s_run.history))

    t_count, s_count = count_parameters(teacher), count_parameters(student)
    warnings = [f"{name} validation loss never improved on its first epoch"
                for name, run in (("teacher", t_run), ("student", s_run)) if _never_improved(run)]
    report = {
        "teacher": {
            "best_val_loss_mm": t_run.best_val_loss_mm,
            "best_epoch": t_run.best_epoch,
            "val_curve_mm": [r.val_loss_mm for r in t_run.history],
            "parameters": t_count.to_dict(),
            "checkpoint_sha256": digest,
        },
        "student": {
            "best_val_loss_mm": s_run.best_val_loss_mm,
            "best_epoch": s_run.best_epoch,
            "val_curve_mm": [r.val_loss_mm for r in s_run.history],
            "parameters": s_count.to_dict(),
        },
        "sparsity_per_layer": [
            {"layer": l, "M_s": m.sparsity()[0], "M_t": m.sparsity()[1], "epsilon_s": m.epsilon_s, "epsilon_t": m.epsilon_t}
            for l, m in enumerate(masks)
        ],
        "student_to_teacher_val_ratio": s_run.best_val_loss_mm / t_run.best_val_loss_mm,
        "warnings": warnings,
    }
    if out:
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return SparsifyResult(teacher, student, masks, t_run, s_run, report)
