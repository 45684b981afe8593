"""``sesgcn`` command line: synth, train, sparsify, eval, collide and bench.

Every subcommand resolves one JSON configuration (file plus flag overrides),
validates it fully, echoes it to ``<out>/config.json`` and writes all outputs
under ``<out>``. Running again with ``--config <out>/config.json`` reproduces
the numbers.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .collision import (
    CollisionConfig,
    collision_scenario,
    evaluate_collisions,
    load_cobots,
)
from .data import (
    build_dataset,
    default_topology,
    load_corpus,
    make_split,
    save_corpus,
    synth_generate,
    window_sequences,
)
from .data.synth import MotionParams
from .errors import (
    ConfigError,
    ContractViolation,
    EmptyCorpusError,
    EmptyReportError,
    ParseError,
    SchemaError,
    SesGcnError,
)
from .metrics import benchmark_inference, evaluate, oracle_forecaster, zero_velocity_forecaster
from .model import VARIANTS, ModelConfig, SesGcnModel, count_parameters, load_model
from .sparsify import SparsifyConfig, teacher_student_train
from .training import TrainConfig, history_csv, train

log = logging.getLogger("sesgcn")

VALIDATION_ERRORS = (ConfigError, ContractViolation, SchemaError, ParseError, EmptyCorpusError, EmptyReportError)
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
SPLITS = ("train", "validation", "test", "all")
FORECASTERS = ("model", "oracle", "zero_velocity")


class UsageError(ConfigError):
    pass


@dataclass(frozen=True)
class DataConfig:
    corpus: str | None = None
    cobots: str | None = None
    n_sequences: int = 60
    n_subjects: int = 20
    length: int = 200
    fps: float = 25.0
    seed: int = 0
    scenario: bool = False
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    stride: int = 10
    exclude_collisions: bool = True
    eval_split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {self.fractions}")
        if self.n_sequences < 1 or self.length < 1 or not self.fps > 0 or self.stride < 1:
            raise ConfigError("n_sequences, length and stride must be >= 1 and fps > 0")
        if not 1 <= self.n_subjects <= self.n_sequences:
            raise ConfigError(f"n_subjects must lie in [1, n_sequences], got {self.n_subjects}")
        if self.eval_split not in SPLITS:
            raise ConfigError(f"eval_split must be one of {SPLITS}, got {self.eval_split!r}")


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str | None = None
    horizons: tuple[int, ...] = (10, 25)
    latency: bool = False
    forecaster: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise ConfigError(f"horizons must be positive frame counts, got {self.horizons}")
        if self.forecaster not in FORECASTERS:
            raise ConfigError(f"forecaster must be one of {FORECASTERS}, got {self.forecaster!r}")


@dataclass(frozen=True)
class BenchConfig:
    n_warmup: int = 5
    n_trials: int = 100
    latency: bool = True

    def __post_init__(self):
        if self.n_trials < 10 or self.n_warmup < 0:
            raise ConfigError("bench needs n_trials >= 10 and n_warmup >= 0")


def _plain(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**d)


def _dump(obj) -> dict:
    d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sparsify: SparsifyConfig = field(default_factory=SparsifyConfig)
    collision: CollisionConfig = field(default_factory=CollisionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
        for name, sub in d.items():
            if not isinstance(sub, dict):
                raise ConfigError(f"section [{name}] must be a JSON object")
        try:
            return cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                sparsify=SparsifyConfig.from_dict(d.get("sparsify", {})),
                collision=CollisionConfig.from_dict(d.get("collision", {})),
                data=_plain(DataConfig, d.get("data", {}), "data"),
                eval=_plain(EvalConfig, d.get("eval", {}), "eval"),
                bench=_plain(BenchConfig, d.get("bench", {}), "bench"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {f.name: _dump(getattr(self, f.name)) for f in fields(self)}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sesgcn", description="Space-time separable GCN motion forecasting pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,sparsify,eval,collide,bench}", parser_class=_Parser)
    sub.required = True

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", required=out_required, help="run directory for all outputs")
        p.add_argument("--seed", type=int, help="overrides train.seed and data.seed")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--scenario", action="store_true", help="write the scripted cobot collision scenario instead")

    for name, helptext in (("train", "train one model variant"), ("sparsify", "teacher-student sparsification")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--corpus", help="corpus directory (default: generate in memory)")
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", help="MPJPE report for a checkpoint")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=SPLITS, help="which split to evaluate (default: test)")
    p.add_argument("--horizon", type=int, action="append", help="horizon in frames (repeatable)")
    p.add_argument("--latency", action="store_true", help="also time single-sequence inference")

    p = sub.add_parser("collide", help="collision precision/recall/F1 from forecasts")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--cobots", help="directory of <sequence_id>.json cobot scripts")
    p.add_argument("--split", choices=SPLITS, help="which split to score (default: test)")
    p.add_argument("--checkpoint")
    p.add_argument("--forecaster", choices=FORECASTERS)
    p.add_argument("--threshold-m", type=float, dest="threshold_m")
    p.add_argument("--clearance-mode", choices=("axis", "surface"), dest="clearance_mode")

    p = sub.add_parser("bench", help="parameter counts and inference latency")
    common(p, out_required=False)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--V", type=int, dest="V")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--checkpoint")
    p.add_argument("--no-latency", action="store_true")
    return parser


def _abspath(p: str | None) -> str | None:
    return str(Path(p).resolve()) if p else None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}

    def put(section: str, key: str, value) -> None:
        if value is not None:
            raw.setdefault(section, {})
            if not isinstance(raw[section], dict):
                raise ConfigError(f"section [{section}] must be a JSON object")
            raw[section][key] = value

    a = vars(args)
    put("train", "seed", a.get("seed"))
    put("data", "seed", a.get("seed"))
    put("train", "epochs", a.get("epochs"))
    put("model", "variant", a.get("variant"))
    for k in ("V", "T", "K"):
        put("model", k, a.get(k))
    put("data", "corpus", _abspath(a.get("corpus")))
    put("data", "cobots", _abspath(a.get("cobots")))
    put("data", "eval_split", a.get("split"))
    if a.get("scenario"):
        put("data", "scenario", True)
    put("eval", "checkpoint", _abspath(a.get("checkpoint")))
    put("eval", "horizons", a.get("horizon"))
    if a.get("latency"):
        put("eval", "latency", True)
    put("eval", "forecaster", a.get("forecaster"))
    put("collision", "threshold_m", a.get("threshold_m"))
    put("collision", "clearance_mode", a.get("clearance_mode"))
    if a.get("no_latency"):
        put("bench", "latency", False)
    # Checkpoints always live under the run directory.
    if isinstance(raw.get("train"), dict):
        raw["train"].pop("checkpoint_dir", None)
    cfg = RunConfig.from_dict(raw)
    for key in ("corpus", "cobots"):
        p = getattr(cfg.data, key)
        if p and not Path(p).is_absolute():
            cfg = _with(cfg, "data", **{key: _abspath(p)})
    return cfg


def _with(cfg: RunConfig, section: str, **changes) -> RunConfig:
    d = cfg.to_dict()
    d[section].update(changes)
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _corpus(cfg: RunConfig):
    d = cfg.data
    if d.corpus:
        return load_corpus(d.corpus)
    topo = default_topology()
    params = MotionParams()
    return synth_generate(topo, d.n_sequences, d.length, d.fps, params, d.seed, d.n_subjects), topo


def _dataset(cfg: RunConfig, seqs, topo):
    if topo.V != cfg.model.V:
        raise SchemaError(f"corpus has V={topo.V} joints but model.V={cfg.model.V}")
    split = make_split(seqs, cfg.data.fractions, cfg.data.seed)
    ds = build_dataset(seqs, split, cfg.model.T, cfg.model.K, cfg.data.stride, cfg.data.exclude_collisions)
    return split, ds


def _eval_sequences(cfg: RunConfig, seqs):
    if cfg.data.eval_split == "all":
        return list(seqs)
    split = make_split(seqs, cfg.data.fractions, cfg.data.seed)
    return split.select(seqs, cfg.data.eval_split)


def _require_checkpoint(cfg: RunConfig) -> str:
    if not cfg.eval.checkpoint:
        raise ConfigError("missing required flag --checkpoint")
    if not Path(cfg.eval.checkpoint).exists():
        raise ConfigError(f"--checkpoint {cfg.eval.checkpoint} does not exist")
    return cfg.eval.checkpoint


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    d = cfg.data
    if d.scenario:
        seqs, topo, _, script = collision_scenario(seed=d.seed, fps=d.fps, cfg=cfg.collision)
        cobot_dir = out / "cobots"
        cobot_dir.mkdir(exist_ok=True)
        for s in seqs:
            _write_json(cobot_dir / f"{s.sequence_id}.json", script)
    else:
        topo = default_topology()
        seqs = synth_generate(topo, d.n_sequences, d.length, d.fps, MotionParams(), d.seed, d.n_subjects)
    save_corpus(out, seqs, topo)
    n_coll = sum(len(s.collision_frames) for s in seqs)
    print(f"wrote {len(seqs)} sequences ({sum(len(s) for s in seqs)} frames, {n_coll} collision frames) to {out}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    seqs, topo = _corpus(cfg)
    split, ds = _dataset(cfg, seqs, topo)
    _write_json(out / "split.json", split.to_json())
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "checkpoint_dir": str(out / "checkpoints")})
    model = SesGcnModel(cfg.model, seed=cfg.train.seed)
    run = train(model, ds, tcfg)
    sha = model.save(out / "model.sesg")
    (out / "history.csv").write_text(history_csv(run.history))
    summary = {
        "variant": cfg.model.variant,
        "best_epoch": run.best_epoch,
        "best_val_loss_mm": run.best_val_loss_mm,
        "final_train_loss_mm": run.history[-1].train_loss_mm,
        "parameters": count_parameters(model).to_dict(),
        "checkpoint_sha256": sha,
        "windows": {"train": len(ds.train), "validation": len(ds.validation), "test": len(ds.test)},
    }
    _write_json(out / "summary.json", summary)
    print(f"best validation loss {run.best_val_loss_mm:.3f} mm at epoch {run.best_epoch}; model written to {out / 'model.sesg'}")


def cmd_sparsify(cfg: RunConfig, out: Path) -> None:
    seqs, topo = _corpus(cfg)
    split, ds = _dataset(cfg, seqs, topo)
    _write_json(out / "split.json", split.to_json())
    res = teacher_student_train(ds, cfg.model, cfg.train, cfg.sparsify, out)
    r = res.report
    print(
        f"teacher {r['teacher']['best_val_loss_mm']:.3f} mm, student {r['student']['best_val_loss_mm']:.3f} mm "
        f"(ratio {r['student_to_teacher_val_ratio']:.4f})"
    )
    for w in r["warnings"]:
        print(f"warning: {w}", file=sys.stderr)


def _forecaster(cfg: RunConfig):
    if cfg.eval.forecaster == "oracle":
        return oracle_forecaster
    if cfg.eval.forecaster == "zero_velocity":
        return zero_velocity_forecaster
    return load_model(_require_checkpoint(cfg))


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    forecaster = _forecaster(cfg)
    seqs, topo = _corpus(cfg)
    if isinstance(forecaster, SesGcnModel):
        mc = forecaster.config
        if topo.V != mc.V:
            raise SchemaError(f"corpus has V={topo.V} joints but the checkpoint expects V={mc.V}")
        T, K = mc.T, mc.K
    else:
        T, K = cfg.model.T, cfg.model.K
    examples = window_sequences(_eval_sequences(cfg, seqs), T, K, cfg.data.stride, cfg.data.exclude_collisions)
    report = evaluate(forecaster, examples, cfg.eval.horizons, topo.joint_names, latency=cfg.eval.latency)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "per_joint.csv").write_text(report.per_joint_csv())
    print(report.to_text(), end="")


def cmd_collide(cfg: RunConfig, out: Path) -> None:
    forecaster = _forecaster(cfg)
    seqs, topo = _corpus(cfg)
    cobot_dir = cfg.data.cobots or (str(Path(cfg.data.corpus) / "cobots") if cfg.data.corpus else None)
    if not cobot_dir or not Path(cobot_dir).is_dir():
        raise ConfigError("no cobot scripts: pass --cobots or keep them in <corpus>/cobots")
    cobots = load_cobots(cobot_dir)
    T, K = (forecaster.config.T, forecaster.config.K) if isinstance(forecaster, SesGcnModel) else (cfg.model.T, cfg.model.K)
    report = evaluate_collisions(
        forecaster, _eval_sequences(cfg, seqs), topo, cobots, cfg.collision, T, K, cfg.data.stride
    )
    _write_json(out / "collisions.json", report.to_dict())
    (out / "collision_log.csv").write_text(report.log_csv())
    print(f"precision {report.precision:.4f}  recall {report.recall:.4f}  F1 {report.f1:.4f}  ({len(report.log)} windows)")


def cmd_bench(cfg: RunConfig, out: Path | None) -> None:
    if cfg.eval.checkpoint:
        model = load_model(_require_checkpoint(cfg))
    else:
        model = SesGcnModel(cfg.model, seed=cfg.train.seed)
    counts = count_parameters(model)
    result = {"config": model.config.to_dict(), "parameters": counts.to_dict()}
    print(f"variant: {model.config.variant}  V={model.config.V} T={model.config.T} K={model.config.K}")
    print(f"adjacency parameters per layer: {counts.adjacency_per_layer[0]}")
    print(f"adjacency parameters: {counts.adjacency}")
    print(f"total parameters: {counts.total}")
    if cfg.bench.latency:
        lat = benchmark_inference(model, cfg.bench.n_warmup, cfg.bench.n_trials, seed=cfg.train.seed)
        result["latency"] = lat.to_dict()
        print(f"latency: mean {lat.mean_s * 1e3:.3f} ms  p95 {lat.p95_s * 1e3:.3f} ms over {lat.n_trials} trials")
    if out:
        _write_json(out / "bench.json", result)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sparsify": cmd_sparsify,
    "eval": cmd_eval,
    "collide": cmd_collide,
    "bench": cmd_bench,
}


def _setup_logging() -> None:
    level = os.environ.get("SESF_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"SESF_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        out = Path(args.out) if args.out else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "config.json", cfg.to_dict())
        COMMANDS[args.command](cfg, out)
        return 0
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except (SesGcnError, OSError, FloatingPointError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
