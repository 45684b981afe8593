"""Acceptance criteria, one test per criterion.

The summary printed at the end of the run (see conftest.py) lists one
PASS/FAIL line per criterion together with the measured values.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from sesgcn import numerics as nx
from sesgcn.cli import main as cli_main
from sesgcn.collision import (
    CollisionConfig,
    all_negative_forecaster,
    collision_runs,
    collision_scenario,
    evaluate_collisions,
    segment_distances,
)
from sesgcn.data import build_dataset, default_corpus, make_split
from sesgcn.metrics import benchmark_inference, evaluate, oracle_forecaster, sequence_loss
from sesgcn.model import (
    ModelConfig,
    SesGcnModel,
    count_parameters,
    dw_block_forward,
    expand_factors,
    gcn_layer_forward,
    model_forward,
    ses_block_forward,
    sts_layer_forward,
)
from sesgcn.sparsify import SparsifyConfig, teacher_student_train
from sesgcn.training import TrainConfig

from op_cases import OP_CASES, make_case

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.json"


# ---------------------------------------------------------------------------
# shared teacher-student run on the default corpus


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    seqs, _ = default_corpus()
    ds = build_dataset(seqs, make_split(seqs))
    desk = json.loads(DESK_CONFIG.read_text())
    train_cfg = TrainConfig.from_dict(desk["train"])
    out = tmp_path_factory.mktemp("desk_run")
    t0 = time.perf_counter()
    result = teacher_student_train(ds, ModelConfig(), train_cfg, SparsifyConfig(target_sparsity=0.30), out)
    return result, ds, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_01_gradient_suite(record_property):
    t0 = time.perf_counter()
    worst_op = {}
    for kind in OP_CASES:
        worst = 0.0
        for seed in range(50):
            f, params = make_case(kind, np.random.default_rng([seed, 1]))
            worst = max(worst, nx.finite_difference_check(f, params, h=1e-6))
        worst_op[kind] = worst

    worst_model = 0.0
    cfg = ModelConfig(V=3, T=4, K=2, C_hidden=(3, 3, 3), n_gcn_layers=2, n_tcn_layers=2, tcn_kernel=1, variant="ses")
    for seed in range(50):
        rng = np.random.default_rng([seed, 2])
        masks = [((rng.random((3, 3, 4)) < 0.7) * 1.0, (rng.random((4, 4, 3)) < 0.7) * 1.0) for _ in range(2)]
        model = SesGcnModel(cfg, seed=seed, masks=masks)
        X = rng.normal(size=(2, 3, 3, 4)) * 100
        Y = rng.normal(size=(2, 3, 3, 2)) * 100

        def loss():
            return sequence_loss(model_forward(X, model, training=True), Y, coord_axis=1)

        worst_model = max(worst_model, nx.finite_difference_check(loss, model.parameters(), h=1e-6))
    elapsed = time.perf_counter() - t0

    record_property("max_rel_error_ops", max(worst_op.values()))
    record_property("max_rel_error_model", worst_model)
    record_property("runtime_s", round(elapsed, 2))
    assert max(worst_op.values()) < 1e-5, worst_op
    assert worst_model < 1e-5
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. factorization oracle


def test_criterion_02_factorization_oracle(record_property):
    worst = 0.0
    for V in range(1, 5):
        for T in range(1, 5):
            rng = np.random.default_rng([V, T])
            X = rng.normal(size=(2, 3, V, T))
            A_s, A_t = rng.normal(size=(V, V, T)), rng.normal(size=(T, T, V))
            W, b = rng.normal(size=(5, 3)), rng.normal(size=5)
            a = sts_layer_forward(X, A_s, A_t, W, b).data
            ref = gcn_layer_forward(X, expand_factors(A_s, A_t), W, b).data
            worst = max(worst, float(np.abs(a - ref).max()))
    record_property("max_abs_diff", worst)
    assert worst <= 1e-12


# ---------------------------------------------------------------------------
# 3. masking oracle


def test_criterion_03_masking_oracle(record_property):
    V, T, C, Co = 4, 5, 4, 6
    mismatches = 0
    leaked = 0.0
    for seed in range(100):
        rng = np.random.default_rng([seed, 3])
        X = rng.normal(size=(2, C, V, T))
        A_s = nx.DiffTensor(rng.normal(size=(V, V, T)), requires_grad=True)
        A_t = nx.DiffTensor(rng.normal(size=(T, T, V)), requires_grad=True)
        p = float(rng.uniform(0.1, 0.9))
        M_s = (rng.random((V, V, T)) < p).astype(float)
        M_t = (rng.random((T, T, V)) < p).astype(float)
        W_dw, W_mlp = rng.normal(size=(C, 1)), rng.normal(size=(Co, C))
        b_dw, b_mlp = rng.normal(size=C), rng.normal(size=Co)
        out = ses_block_forward(X, A_s, A_t, M_s, M_t, W_dw, W_mlp, b_dw, b_mlp)
        ref = dw_block_forward(X, np.where(M_s > 0, A_s.data, 0.0), np.where(M_t > 0, A_t.data, 0.0), W_dw, W_mlp, b_dw, b_mlp)
        mismatches += int(not np.array_equal(out.data, ref.data))
        nx.backward(nx.sum_(nx.mul(out, rng.normal(size=out.shape))))
        leaked = max(leaked, float(np.abs(A_s.grad[M_s == 0]).max(initial=0.0)), float(np.abs(A_t.grad[M_t == 0]).max(initial=0.0)))
    record_property("bitwise_mismatches", mismatches)
    record_property("max_masked_gradient", leaked)
    assert mismatches == 0
    assert leaked == 0.0


# ---------------------------------------------------------------------------
# 4. parameter arithmetic


def test_criterion_04_parameter_arithmetic(record_property):
    vanilla = count_parameters(SesGcnModel(ModelConfig(V=22, T=10, variant="vanilla"), seed=0))
    factored = count_parameters(SesGcnModel(ModelConfig(V=22, T=10, variant="sts"), seed=0))
    record_property("vanilla_per_layer", vanilla.adjacency_per_layer[0])
    record_property("factored_per_layer", factored.adjacency_per_layer[0])
    assert set(vanilla.adjacency_per_layer) == {48_400}
    assert set(factored.adjacency_per_layer) == {7_040}
    # enumeration oracle: one scalar per entry of each adjacency tensor
    assert (22 * 10) ** 2 == 48_400 and 22 * 22 * 10 + 10 * 10 * 22 == 7_040


# ---------------------------------------------------------------------------
# 5-7. teacher-student pipeline on the default corpus


def test_criterion_05_sparsification_outcome(desk_run, record_property):
    result, _, _ = desk_run
    sparsities = [s for m in result.masks for s in m.sparsity()]
    t_total = count_parameters(result.teacher).total
    s_total = count_parameters(result.student).total
    record_property("mask_sparsity_min", min(sparsities))
    record_property("mask_sparsity_max", max(sparsities))
    record_property("teacher_params", t_total)
    record_property("student_params", s_total)
    assert all(abs(s - 0.30) <= 0.01 for s in sparsities)
    assert s_total < t_total


def test_criterion_06_teacher_student_quality(desk_run, record_property):
    result, _, elapsed = desk_run
    teacher = result.teacher_run.best_val_loss_mm
    student = result.student_run.best_val_loss_mm
    record_property("teacher_val_mm", round(teacher, 3))
    record_property("student_val_mm", round(student, 3))
    record_property("ratio", round(student / teacher, 4))
    record_property("pipeline_runtime_s", round(elapsed, 1))
    assert student <= 1.15 * teacher
    assert elapsed < 30 * 60


def test_criterion_07_baseline_ordering(desk_run, record_property):
    result, ds, _ = desk_run
    report = evaluate(result.student, ds.test, horizons=(25,))
    model, baseline = report.overall[25], report.baseline_overall[25]
    record_property("ses_mpjpe_25_mm", round(model, 3))
    record_property("zero_velocity_mpjpe_25_mm", round(baseline, 3))
    record_property("margin", round(1 - model / baseline, 4))
    assert model <= 0.90 * baseline


# ---------------------------------------------------------------------------
# 8. geometry oracle


def _grid_points(p, q, n):
    """n evenly spaced points on [p, q] with the endpoints reproduced exactly."""
    u = np.linspace(0.0, 1.0, n)[:, None]
    pts = p + u * (q - p)
    pts[0], pts[-1] = p, q
    return pts


def _grid_min(p1, q1, p2, q2, n=1001):
    """Brute-force minimum distance over all n x n pairs of sampled points."""
    A, B = _grid_points(p1, q1, n), _grid_points(p2, q2, n)
    best = np.inf
    for i in range(0, n, 256):
        d = A[i : i + 256, None, :] - B[None, :, :]
        best = min(best, float(np.sqrt(np.einsum("abi,abi->ab", d, d)).min()))
    return best


def test_criterion_08_geometry_oracle(record_property):
    # The grid pins the true closest pair to within half a step on each
    # segment, so sampled - exact <= 5e-4 * (L1 + L2). Endpoints in a 5 cm cube
    # keep L1 + L2 <= 0.173 m, where that bound is inside the 1e-4 m tolerance.
    rng = np.random.default_rng(8)
    P = rng.uniform(-0.025, 0.025, size=(4, 1000, 3))
    exact = segment_distances(P[0], P[1], P[2], P[3])
    sampled = np.array([_grid_min(*P[:, i]) for i in range(1000)])
    gap = sampled - exact

    # workspace scale: same check against the per-pair resolution bound
    W = rng.uniform(-1.0, 1.0, size=(4, 200, 3))
    w_exact = segment_distances(W[0], W[1], W[2], W[3])
    w_sampled = np.array([_grid_min(*W[:, i]) for i in range(200)])
    lengths = np.linalg.norm(W[1] - W[0], axis=-1) + np.linalg.norm(W[3] - W[2], axis=-1)
    w_gap = w_sampled - w_exact

    record_property("max_abs_gap_m", float(np.abs(gap).max()))
    record_property("min_sampled_minus_exact_m", float(gap.min()))
    record_property("workspace_max_gap_over_bound", float((w_gap / (5e-4 * lengths)).max()))
    assert np.abs(gap).max() <= 1e-4
    assert np.all(exact <= sampled)
    assert np.all(w_exact <= w_sampled)
    assert np.all(w_gap <= 5e-4 * lengths)


# ---------------------------------------------------------------------------
# 9. collision scoring


def test_criterion_09_collision_scoring(record_property):
    seqs, topo, cobots, _ = collision_scenario()
    n_events = len(collision_runs(seqs[0].collision_frames))
    cfg = CollisionConfig()
    oracle = evaluate_collisions(oracle_forecaster, seqs, topo, cobots, cfg)
    negative = evaluate_collisions(all_negative_forecaster, seqs, topo, cobots, cfg)
    record_property("ground_truth_events", n_events)
    record_property("oracle_prf", (oracle.precision, oracle.recall, oracle.f1))
    record_property("all_negative_f1", negative.f1)
    assert n_events == 10
    assert (oracle.precision, oracle.recall, oracle.f1) == (1.0, 1.0, 1.0)
    assert negative.f1 == 0.0


# ---------------------------------------------------------------------------
# 10. latency


def test_criterion_10_latency(record_property):
    cfg = ModelConfig()
    assert (cfg.V, cfg.T, cfg.K) == (15, 10, 25)
    stats = benchmark_inference(SesGcnModel(cfg, seed=0), n_warmup=5, n_trials=100)
    record_property("mean_ms", round(stats.mean_s * 1e3, 3))
    record_property("p95_ms", round(stats.p95_s * 1e3, 3))
    assert stats.n_trials == 100
    assert stats.mean_s < 0.050


# ---------------------------------------------------------------------------
# 11. CLI determinism

TINY = {
    "model": {"V": 15, "T": 4, "K": 4, "C_hidden": [3, 4, 4], "n_gcn_layers": 2, "n_tcn_layers": 2, "tcn_kernel": 3},
    "train": {"epochs": 3, "batch_size": 8, "base_lr": 0.003, "decay_epochs": [2]},
    "data": {"n_sequences": 6, "n_subjects": 3, "length": 40, "fractions": [0.34, 0.33, 0.33], "stride": 8},
    "eval": {"horizons": [2, 4]},
    "bench": {"n_warmup": 1, "n_trials": 10},
}


def _strip_latency(obj):
    if isinstance(obj, dict):
        return {k: _strip_latency(v) for k, v in obj.items() if k != "latency"}
    if isinstance(obj, list):
        return [_strip_latency(v) for v in obj]
    return obj


def _outputs(run_dir: Path) -> dict[str, object]:
    """All emitted files keyed by relative path; JSON has latency timings removed."""
    out = {}
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file():
            continue
        rel = str(path.relative_to(run_dir))
        if path.suffix == ".json":
            out[rel] = json.dumps(_strip_latency(json.loads(path.read_text())), sort_keys=True)
        elif rel == "report.txt":
            out[rel] = "\n".join(l for l in path.read_text().splitlines() if not l.startswith("latency"))
        else:
            out[rel] = path.read_bytes()
    return out


def test_criterion_11_cli_determinism(tmp_path, record_property, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    corpus, scenario = tmp_path / "corpus", tmp_path / "scenario"
    runs = {
        "synth": ["synth", "--config", cfg, "--out", corpus],
        "scenario": ["synth", "--scenario", "--out", scenario],
        "train": ["train", "--config", cfg, "--corpus", corpus, "--out", tmp_path / "train"],
        "eval": ["eval", "--config", cfg, "--corpus", corpus, "--checkpoint", tmp_path / "train" / "model.sesg", "--latency", "--out", tmp_path / "eval"],
        "sparsify": ["sparsify", "--config", cfg, "--corpus", corpus, "--out", tmp_path / "sparsify"],
        "collide": ["collide", "--corpus", scenario, "--split", "all", "--checkpoint", tmp_path / "train" / "model.sesg", "--out", tmp_path / "collide"],
        "bench": ["bench", "--config", cfg, "--out", tmp_path / "bench"],
    }
    compared = {}
    for name, argv in runs.items():
        first = Path(argv[argv.index("--out") + 1])
        assert cli_main([str(a) for a in argv]) == 0, name
        stdout_first = capsys.readouterr().out
        second = tmp_path / f"{name}_again"
        assert cli_main([argv[0], "--config", str(first / "config.json"), "--out", str(second)]) == 0, name
        stdout_second = capsys.readouterr().out
        a, b = _outputs(first), _outputs(second)
        assert a.keys() == b.keys(), name
        differing = [k for k in a if a[k] != b[k]]
        assert not differing, f"{name}: {differing}"
        if name not in ("bench", "eval", "synth", "scenario"):
            assert stdout_first.replace(str(first), "") == stdout_second.replace(str(second), ""), name
        compared[name] = len(a)
    record_property("files_compared", compared)
