"""Forecast error metrics, the zero-velocity baseline, evaluation reports and latency."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import numerics as nx
from .data.corpus import WindowedExample, stack_examples
from .errors import ConfigError, ContractViolation, EmptyReportError
from .model import SesGcnModel, count_parameters, predict
from .numerics import DiffTensor

Forecaster = Union[SesGcnModel, Callable[[WindowedExample], np.ndarray]]


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ContractViolation(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if pred.ndim < 3 or pred.shape[-1] != 3:
        raise ContractViolation(f"expected [..., K, V, 3], got {pred.shape}")


def per_frame_errors(pred, truth) -> np.ndarray:
    """Mean joint displacement per forecast frame: ``[..., K, V, 3] -> [..., K]``."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    return np.linalg.norm(pred - truth, axis=-1).mean(axis=-1)


def mpjpe_at_frame(pred, truth, t: int) -> float:
    """``(1/V) sum_v ||pred[t, v] - truth[t, v]||`` for ``[K, V, 3]`` arrays (t is zero-based)."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    if pred.ndim != 3:
        raise ContractViolation(f"expected [K, V, 3], got {pred.shape}")
    if not 0 <= t < pred.shape[0]:
        raise ContractViolation(f"frame index {t} outside [0, {pred.shape[0]})")
    return float(np.linalg.norm(pred[t] - truth[t], axis=-1).mean())


def sequence_loss(pred, truth, coord_axis: int = -1) -> DiffTensor:
    """Mean over frames, joints (and batch) of the Euclidean joint error.

    ``coord_axis`` names the xyz axis; every other axis is averaged.
    """
    pred = nx.as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, DiffTensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractViolation(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if pred.shape[coord_axis] != 3:
        raise ContractViolation(f"axis {coord_axis} of {pred.shape} is not a 3D coordinate axis")
    return nx.mean(nx.l2_norm(nx.sub(pred, truth), axis=coord_axis))


def zero_velocity_forecast(X_in, K: int) -> np.ndarray:
    """Repeat the last observed pose ``K`` times: ``[.., T, V, 3] -> [.., K, V, 3]``."""
    X = np.asarray(X_in, dtype=np.float64)
    if X.ndim < 3 or X.shape[-3] < 1:
        raise ContractViolation(f"need at least one observed frame, got {X.shape}")
    if K < 1:
        raise ContractViolation("K must be >= 1")
    last = X[..., -1:, :, :]
    return np.repeat(last, K, axis=-3)


def forecast(forecaster: Forecaster, examples: Sequence[WindowedExample], batch_size: int = 256) -> np.ndarray:
    """``[N, K, V, 3]`` predictions from a model (batched) or a per-example callable."""
    if isinstance(forecaster, SesGcnModel):
        inputs, _ = stack_examples(examples)
        return predict(forecaster, inputs, batch_size)
    return np.stack([np.asarray(forecaster(e), dtype=np.float64) for e in examples])


def oracle_forecaster(example: WindowedExample) -> np.ndarray:
    return example.target


def zero_velocity_forecaster(example: WindowedExample) -> np.ndarray:
    return zero_velocity_forecast(example.input, example.target.shape[0])


@dataclass(frozen=True)
class LatencyStats:
    mean_s: float
    p95_s: float
    n_trials: int

    def to_dict(self) -> dict:
        return {"mean_s": self.mean_s, "p95_s": self.p95_s, "n_trials": self.n_trials}


@dataclass
class EvalReport:
    """MPJPE (mm) at horizon frames, overall and per action, with baseline columns."""

    horizons: tuple[int, ...]
    overall: dict[int, float]
    per_action: dict[str, dict[int, float]]
    action_counts: dict[str, int]
    baseline_overall: dict[int, float]
    baseline_per_action: dict[str, dict[int, float]]
    per_joint: dict[int, list[float]]
    joint_names: tuple[str, ...]
    n_examples: int
    parameters: dict | None = None
    latency: LatencyStats | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        h = lambda d: {str(k): v for k, v in d.items()}  # noqa: E731
        return {
            "horizons_frames": list(self.horizons),
            "n_examples": self.n_examples,
            "overall_mpjpe_mm": h(self.overall),
            "per_action_mpjpe_mm": {a: h(v) for a, v in self.per_action.items()},
            "action_counts": dict(self.action_counts),
            "zero_velocity_overall_mpjpe_mm": h(self.baseline_overall),
            "zero_velocity_per_action_mpjpe_mm": {a: h(v) for a, v in self.baseline_per_action.items()},
            "per_joint_mean_error_mm": {
                str(k): dict(zip(self.joint_names, v)) for k, v in self.per_joint.items()
            },
            "parameters": self.parameters,
            "latency": self.latency.to_dict() if self.latency else None,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        cols = [f"{h}f" for h in self.horizons]
        rows = [["action", "n"] + [f"model@{c}" for c in cols] + [f"zerovel@{c}" for c in cols]]
        for a in sorted(self.per_action):
            rows.append(
                [a, str(self.action_counts[a])]
                + [f"{self.per_action[a][h]:.2f}" for h in self.horizons]
                + [f"{self.baseline_per_action[a][h]:.2f}" for h in self.horizons]
            )
        rows.append(
            ["overall", str(self.n_examples)]
            + [f"{self.overall[h]:.2f}" for h in self.horizons]
            + [f"{self.baseline_overall[h]:.2f}" for h in self.horizons]
        )
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        out = "MPJPE (mm)\n" + "\n".join(lines) + "\n"
        if self.parameters:
            out += f"parameters: total {self.parameters['total']}, adjacency {self.parameters['adjacency']}\n"
        if self.latency:
            out += f"latency: mean {self.latency.mean_s * 1e3:.3f} ms, p95 {self.latency.p95_s * 1e3:.3f} ms\n"
        return out

    def per_joint_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["joint", "mean_error_mm", "horizon_frames"])
        for h in self.horizons:
            for name, err in zip(self.joint_names, self.per_joint[h]):
                w.writerow([name, repr(float(err)), h])
        return buf.getvalue()


def _horizon_index(h: int, K: int) -> int:
    if not 1 <= h <= K:
        raise ConfigError(f"horizon {h} frames is outside the forecast length 1..{K}")
    return h - 1


def evaluate(
    forecaster: Forecaster,
    examples: Sequence[WindowedExample],
    horizons: Sequence[int] = (10, 25),
    joint_names: Sequence[str] | None = None,
    latency: bool = False,
) -> EvalReport:
    """MPJPE at each horizon (in frames; horizon h is forecast index h - 1).

    Overall values are means over all examples, so they equal the
    example-weighted mean of the per-action values.
    """
    if not examples:
        raise EmptyReportError("no windows to evaluate")
    horizons = tuple(int(h) for h in horizons)
    if not horizons:
        raise ConfigError("need at least one horizon")
    inputs, truth = stack_examples(examples)
    K, V = truth.shape[1], truth.shape[2]
    idx = [_horizon_index(h, K) for h in horizons]
    pred = forecast(forecaster, examples)
    if pred.shape != truth.shape:
        raise ContractViolation(f"forecaster returned {pred.shape}, expected {truth.shape}")
    base = zero_velocity_forecast(inputs, K)

    joint_err = np.linalg.norm(pred - truth, axis=-1)  # [N, K, V]
    err = joint_err.mean(axis=-1)  # [N, K]
    base_err = np.linalg.norm(base - truth, axis=-1).mean(axis=-1)
    actions = np.array([e.action_label for e in examples])
    labels = sorted(set(actions.tolist()))

    def agg(values: np.ndarray) -> tuple[dict[int, float], dict[str, dict[int, float]]]:
        overall = {h: float(values[:, i].mean()) for h, i in zip(horizons, idx)}
        per = {a: {h: float(values[actions == a, i].mean()) for h, i in zip(horizons, idx)} for a in labels}
        return overall, per

    overall, per_action = agg(err)
    b_overall, b_per_action = agg(base_err)
    names = tuple(joint_names) if joint_names is not None else tuple(f"joint{j}" for j in range(V))
    if len(names) != V:
        raise ContractViolation(f"{len(names)} joint names for V={V}")
    per_joint = {h: joint_err[:, i, :].mean(axis=0).tolist() for h, i in zip(horizons, idx)}
    params = lat = None
    if isinstance(forecaster, SesGcnModel):
        params = count_parameters(forecaster).to_dict()
        if latency:
            lat = benchmark_inference(forecaster)
    return EvalReport(
        horizons, overall, per_action, {a: int((actions == a).sum()) for a in labels},
        b_overall, b_per_action, per_joint, names, len(examples), params, lat,
    )


def benchmark_inference(model: SesGcnModel, n_warmup: int = 5, n_trials: int = 100, seed: int = 0) -> LatencyStats:
    """Wall-clock seconds per single-sequence forward pass (warm-up runs excluded)."""
    if n_trials < 10:
        raise ConfigError(f"n_trials must be >= 10, got {n_trials}")
    if n_warmup < 0:
        raise ConfigError("n_warmup must be >= 0")
    cfg = model.config
    x = np.random.default_rng(seed).normal(0.0, 300.0, size=(cfg.T, cfg.V, 3))
    for _ in range(n_warmup):
        predict(model, x)
    times = np.empty(n_trials)
    for i in range(n_trials):
        t0 = time.perf_counter()
        predict(model, x)
        times[i] = time.perf_counter() - t0
    mean = float(times.mean())
    p95 = float(np.quantile(times, 0.95, method="inverted_cdf"))
    return LatencyStats(mean, p95, n_trials)
