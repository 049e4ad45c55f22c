"""Command-line orchestration: data generation, training, evaluation, ablations.

Every command reads a flat ``key = value`` config (``#`` starts a comment),
accepts ``--set key=value`` overrides, writes its outputs through a temporary
file and a rename, and refuses to replace existing outputs unless
``--overwrite`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import typing
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluate as E
from . import model as M
from . import numerics as nx
from . import synth as S
from . import tasks
from .rng import derive_seed, stream

log = logging.getLogger("auxformer")

GRAD_TOLERANCE = 1e-4
GRAD_ABS_TOLERANCE = 1e-9

ABLATIONS = (
    ("pred", 0.0, 0.0),
    ("pred+mask", 1.0, 0.0),
    ("pred+denoise", 0.0, 1.0),
    ("pred+mask+denoise", 1.0, 1.0),
)


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class UsageError(ValueError):
    """Bad command-line arguments or paths."""


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    F: int = 16
    L: int = 1
    H: int = 2
    masking_variant: str = "post_softmax_literal"
    paper_literal_masked_update: bool = False
    prenorm: bool = False
    structure: str = "iterative"
    # corruption
    p_m: float = 0.5
    p_n: float = 0.3
    sigma: float = 50.0
    # loss weights
    alpha1: float = 1.0
    alpha2: float = 1.0
    # optimisation
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    input_scale: float = 0.01
    squared_loss: bool = True
    mask_past_only: bool = False
    # synthetic data
    J: int = 9
    t_past: int = 10
    t_future: int = 10
    frame_rate: float = 25.0
    freq_band: tuple[float, float] = (0.3, 1.5)
    amp_band: tuple[float, float] = (0.1, 0.6)
    speed_band: tuple[float, float] = (0.0, 500.0)
    n_train: int = 1000
    n_test: int = 200
    # experiments
    seed: int = 0
    horizons: tuple[int, ...] = (2, 4, 8, 10)
    ablate_seeds: int = 5
    ablate_ratios: tuple[float, ...] = (0.1, 0.5, 0.9)
    robust_ratios: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    robust_sigma: float = 50.0

    def __post_init__(self):
        try:
            self.hyper()
            self.corruption(0)
            self.weights()
            self.train_config()
            self.synth()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.n_train < 1 or self.n_test < 1 or self.ablate_seeds < 1:
            raise ConfigError("n_train, n_test and ablate_seeds must be >= 1")
        if not self.horizons:
            raise ConfigError("horizons must not be empty")
        bad = [h for h in self.horizons if not 1 <= h <= self.t_future]
        if bad:
            raise ConfigError(f"horizons {bad} outside 1..{self.t_future}")
        for r in self.ablate_ratios + self.robust_ratios:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"ratio {r} outside [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    # -- views onto the module configs ---------------------------------------

    def hyper(self) -> M.HyperConfig:
        return M.HyperConfig(self.F, self.L, self.H, self.masking_variant, self.paper_literal_masked_update,
                             self.prenorm, self.structure)

    def corruption(self, seed: int) -> tasks.CorruptionSpec:
        return tasks.CorruptionSpec(self.p_m, self.p_n, self.sigma, seed)

    def weights(self) -> tasks.LossWeights:
        return tasks.LossWeights(self.alpha1, self.alpha2)

    def train_config(self) -> tasks.TrainConfig:
        return tasks.TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.beta1, self.beta2, self.eps,
                                 self.input_scale, self.squared_loss, self.mask_past_only)

    def synth(self) -> S.SynthConfig:
        return S.SynthConfig(self.J, self.t_past, self.t_future, self.frame_rate, self.freq_band, self.amp_band,
                             self.speed_band, self.seed, self.n_train)

    @property
    def T(self) -> int:
        return self.t_past + self.t_future

    # -- text form -------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse_value(key, raw, hints[key])
        return dataclasses.replace(base or cls(), **changes)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(key: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _parse_value(key: str, raw: str, hint):
    if typing.get_origin(hint) is tuple:
        args = typing.get_args(hint)
        parts = [p for p in raw.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(key, p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {raw!r}")
        return tuple(_parse_scalar(key, p, a) for p, a in zip(parts, args))
    return _parse_scalar(key, raw, hint)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        values.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v
    return ExperimentConfig.from_mapping(values)


# ---------------------------------------------------------------------------
# data directories


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def make_datasets(exp: ExperimentConfig) -> tuple[list[M.MotionSequence], list[M.MotionSequence]]:
    skeleton = S.chain_skeleton(exp.J)
    cfg = exp.synth()
    return (S.generate_dataset(skeleton, cfg, exp.n_train, exp.seed, "train"),
            S.generate_dataset(skeleton, cfg, exp.n_test, exp.seed, "test"))


def load_split(data_dir: str | Path, split: str) -> list[M.MotionSequence]:
    d = Path(data_dir) / split
    files = sorted(d.glob("*.motn"))
    if not files:
        raise UsageError(f"no motion files in {d}")
    return [S.read_motion(f) for f in files]


def sidecar(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".cfg")


def load_model(checkpoint: str | Path) -> tuple[dict[str, np.ndarray], ExperimentConfig]:
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    cfg_path = sidecar(ckpt)
    if not cfg_path.is_file():
        raise UsageError(f"checkpoint config {cfg_path} not found")
    exp = ExperimentConfig.from_mapping(parse_config_text(cfg_path.read_text(), str(cfg_path)))
    params = M.load_checkpoint(ckpt)
    M.check_params(params, exp.hyper(), exp.T, exp.J)
    return params, exp


# ---------------------------------------------------------------------------
# experiment runners


def train_model(
    exp: ExperimentConfig,
    train_set: Sequence[M.MotionSequence],
    run_seed: int,
    val: Sequence[M.MotionSequence] = (),
) -> tuple[dict[str, np.ndarray], tasks.TrainReport]:
    """Initialise from ``run_seed`` and train under ``exp``."""
    hyper = exp.hyper()
    params = M.init_params(hyper, exp.T, exp.J, stream(run_seed, "init"))
    return tasks.train(train_set, params, exp.corruption(run_seed), exp.weights(), exp.train_config(), hyper,
                       run_seed, val=val, horizons=exp.horizons if val else (), frame_rate=exp.frame_rate)


def replicate_seeds(exp: ExperimentConfig) -> list[int]:
    return [derive_seed(exp.seed, "replicate", k) for k in range(exp.ablate_seeds)]


@dataclass
class Run:
    label: str
    seed: int
    params: dict[str, np.ndarray]
    mpjpe: dict[int, float]


@dataclass
class StudyResult:
    """Trained runs grouped by configuration label, one per replicate seed."""

    horizons: tuple[int, ...]
    runs: dict[str, list[Run]] = field(default_factory=dict)

    def add(self, run: Run) -> None:
        self.runs.setdefault(run.label, []).append(run)

    def median(self, label: str, horizon: int) -> float:
        return float(np.median([r.mpjpe[horizon] for r in self.runs[label]]))

    def table(self) -> list[tuple]:
        return [(label, len(rs)) + tuple(self.median(label, h) for h in self.horizons) for label, rs in self.runs.items()]


def _run(exp, label, seed, train_set, test_set) -> Run:
    params, _ = train_model(exp, train_set, seed)
    predictor = E.ModelPredictor(params, exp.hyper(), exp.input_scale)
    errs = E.evaluate(predictor, test_set, exp.horizons)
    log.info("%s seed=%d %s", label, seed, {h: round(e, 2) for h, e in errs.items()})
    return Run(label, seed, params, errs)


def run_ablation(exp: ExperimentConfig, train_set, test_set) -> StudyResult:
    """The four auxiliary-task configurations, each trained once per replicate seed.

    All configurations of a replicate share initialisation, shuffling and
    corruption streams, so differences come from the loss weights alone.
    """
    out = StudyResult(tuple(exp.horizons))
    for seed in replicate_seeds(exp):
        for label, a1, a2 in ABLATIONS:
            out.add(_run(exp.replace(alpha1=a1, alpha2=a2), label, seed, train_set, test_set))
    return out


def run_ratio_study(exp: ExperimentConfig, train_set, test_set, ratios: Sequence[float],
                    reuse: StudyResult | None = None) -> StudyResult:
    """Full auxiliary training at each masking ratio ``p_m``.

    Runs from ``reuse`` (an ablation with the same config) stand in for the
    ratio that matches ``exp.p_m``.
    """
    out = StudyResult(tuple(exp.horizons))
    full = ABLATIONS[-1][0]
    for seed in replicate_seeds(exp):
        for r in ratios:
            label = f"p_m={r:g}"
            if reuse is not None and r == exp.p_m and exp.alpha1 == exp.alpha2 == 1.0:
                src = next(x for x in reuse.runs[full] if x.seed == seed)
                out.add(Run(label, seed, src.params, src.mpjpe))
                continue
            out.add(_run(exp.replace(p_m=r, alpha1=1.0, alpha2=1.0), label, seed, train_set, test_set))
    return out


def run_structure_study(exp: ExperimentConfig, train_set, test_set) -> StudyResult:
    out = StudyResult(tuple(exp.horizons))
    for seed in replicate_seeds(exp):
        for structure in M.STRUCTURES:
            out.add(_run(exp.replace(structure=structure), structure, seed, train_set, test_set))
    return out


def degradation(exp: ExperimentConfig, params, test_set, ratio: float, horizon: int, seed: int) -> float:
    """Relative MPJPE increase at ``horizon`` when ``ratio`` of past inputs is missing."""
    predictor = E.ModelPredictor(params, exp.hyper(), exp.input_scale)
    res = E.robustness_sweep(predictor, test_set, "missing", [0.0, ratio], exp.sigma, seed, [horizon]).mpjpe
    return res[ratio][horizon] / res[0.0][horizon] - 1.0


@dataclass
class GradReport:
    errors: dict[str, float]
    resolvable: float
    unresolved_abs: float

    def passed(self) -> bool:
        return self.resolvable < GRAD_TOLERANCE and self.unresolved_abs < GRAD_ABS_TOLERANCE

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def gradcheck(exp: ExperimentConfig, step: float = 1e-5, floor: float = 1e-6) -> GradReport:
    """Tape gradients of the three-task loss against central differences on a tiny instance.

    Masking and structure flags come from ``exp``; sizes are fixed at
    T=4 (2 past, 2 future), J=2, F=8, H=2, L=1. Besides the per-parameter
    max relative error, the report separates components with
    ``|g| > floor`` (where the relative error is meaningful) from the rest,
    for which only the absolute gap is reported.
    """
    hyper = dataclasses.replace(exp.hyper(), F=8, H=2, L=1)
    g = stream(exp.seed, "gradcheck")
    x = M.MotionSequence(g.normal(size=(4, 2, 3)) * 100.0, 2, 2)
    params = M.init_params(hyper, 4, 2, g)
    spec = exp.corruption(exp.seed)
    weights = exp.weights()
    train = exp.train_config()

    def loss(P):
        value, _ = tasks.total_loss(x, P, spec, weights, stream(exp.seed, "gradcheck", "corrupt"), hyper, train)
        return value

    _, analytic = nx.analytic_grads(loss, params)
    numeric = nx.central_differences(loss, params, step)
    errors, resolvable, unresolved = {}, 0.0, 0.0
    for k, a in analytic.items():
        r = nx.relative_errors(a, numeric[k])
        errors[k] = float(r.max()) if r.size else 0.0
        big = np.abs(a) > floor
        if big.any():
            resolvable = max(resolvable, float(r[big].max()))
        if (~big).any():
            unresolved = max(unresolved, float(np.abs(a - numeric[k])[~big].max()))
    return GradReport(errors, resolvable, unresolved)


# ---------------------------------------------------------------------------
# commands


def _guard(paths: Sequence[Path], overwrite: bool) -> None:
    for p in paths:
        if p.exists() and not overwrite:
            raise UsageError(f"{p} exists; pass --overwrite to replace it")


def _horizon_cols(horizons) -> list[str]:
    return [f"mpjpe@{h}" for h in horizons]


def cmd_gen(args, exp: ExperimentConfig) -> int:
    out = Path(args.out)
    manifest = out / "manifest.txt"
    _guard([manifest], args.overwrite)
    train_set, test_set = make_datasets(exp)
    for split, seqs in (("train", train_set), ("test", test_set)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.motn"):
            old.unlink()
        for i, x in enumerate(seqs):
            S.write_motion(d / f"{i:06d}.motn", x)
    write_text_atomic(manifest, f"# train={len(train_set)} test={len(test_set)}\n" + exp.to_text())
    print(f"wrote {len(train_set)} train and {len(test_set)} test sequences to {out}")
    return 0


def cmd_train(args, exp: ExperimentConfig) -> int:
    ckpt = Path(args.out)
    report_path = Path(args.report) if args.report else ckpt.with_suffix(".csv")
    _guard([ckpt, sidecar(ckpt), report_path], args.overwrite)
    train_set = load_split(args.data, "train")
    val = load_split(args.data, "test") if (Path(args.data) / "test").is_dir() else []
    _check_geometry(exp, train_set)
    params, report = train_model(exp, train_set, derive_seed(exp.seed, "train"), val=val)
    M.save_checkpoint(ckpt, params)
    write_text_atomic(sidecar(ckpt), exp.to_text())
    report.to_csv(report_path)
    print(f"saved {ckpt} and {report_path}")
    return 0


def _check_geometry(exp: ExperimentConfig, seqs) -> None:
    x = seqs[0]
    if (x.t_past, x.t_future, x.J) != (exp.t_past, exp.t_future, exp.J):
        raise UsageError(f"data has T_p={x.t_past}, T_f={x.t_future}, J={x.J}; config expects "
                         f"T_p={exp.t_past}, T_f={exp.t_future}, J={exp.J}")


def _parse_list(text: str, kind, name: str):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name}: cannot parse {text!r}") from None


def cmd_eval(args, exp: ExperimentConfig) -> int:
    params, trained = load_model(args.checkpoint)
    horizons = _parse_list(args.horizons, int, "horizons") if args.horizons else list(trained.horizons)
    bad = [h for h in horizons if not 1 <= h <= trained.t_future]
    if bad or not horizons:
        raise UsageError(f"horizons {bad or horizons} outside 1..{trained.t_future}")
    out = Path(args.out)
    _guard([out], args.overwrite)
    test_set = load_split(args.data, "test")
    _check_geometry(trained, test_set)
    errs = E.evaluate(E.ModelPredictor(params, trained.hyper(), trained.input_scale), test_set, horizons)
    rows = [(h, h * 1000.0 / trained.frame_rate, e, len(test_set)) for h, e in errs.items()]
    E.write_rows(out, ("horizon", "horizon_ms", "mpjpe", "n_samples"), rows)
    for h, ms, e, _ in rows:
        print(f"{ms:7.1f} ms  {e:9.3f} mm")
    return 0


def cmd_ablate(args, exp: ExperimentConfig) -> int:
    out = Path(args.out)
    ratios = _parse_list(args.ratios, float, "ratios") if args.ratios is not None else list(exp.ablate_ratios)
    extra = {"runs": out.with_name(out.stem + "_runs.csv")}
    if ratios:
        extra["ratio"] = out.with_name(out.stem + "_ratio.csv")
    if args.structures:
        extra["structure"] = out.with_name(out.stem + "_structure.csv")
    _guard([out, *extra.values()], args.overwrite)
    train_set, test_set = load_split(args.data, "train"), load_split(args.data, "test")
    _check_geometry(exp, train_set)
    cols = _horizon_cols(exp.horizons)

    ablation = run_ablation(exp, train_set, test_set)
    weights = {label: (a1, a2) for label, a1, a2 in ABLATIONS}
    E.write_rows(out, ["config", "alpha1", "alpha2", "n_seeds"] + cols,
                 [(label, *weights[label], n, *vals) for label, n, *vals in ablation.table()])
    E.write_rows(extra["runs"], ["config", "seed"] + cols,
                 [(r.label, r.seed, *(r.mpjpe[h] for h in exp.horizons))
                  for rs in ablation.runs.values() for r in rs])
    if ratios:
        study = run_ratio_study(exp, train_set, test_set, ratios, reuse=ablation)
        E.write_rows(extra["ratio"], ["p_m", "n_seeds"] + cols,
                     [(r, n, *vals) for r, (_, n, *vals) in zip(ratios, study.table())])
    if args.structures:
        study = run_structure_study(exp, train_set, test_set)
        E.write_rows(extra["structure"], ["structure", "n_seeds"] + cols, study.table())
    print(f"wrote {out}")
    return 0


def cmd_robust(args, exp: ExperimentConfig) -> int:
    ratios = _parse_list(args.ratios, float, "ratios") if args.ratios else list(exp.robust_ratios)
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        raise UsageError(f"ratios {ratios} must lie in [0, 1]")
    out = Path(args.out)
    _guard([out], args.overwrite)
    if args.baseline:
        fn = {"zero_velocity": E.zero_velocity_baseline, "linear": E.linear_extrapolation_baseline}[args.baseline]
        predictor, cfg = E.BaselinePredictor(fn, args.baseline), exp
    else:
        if not args.checkpoint:
            raise UsageError("robust needs --checkpoint or --baseline")
        params, cfg = load_model(args.checkpoint)
        predictor = E.ModelPredictor(params, cfg.hyper(), cfg.input_scale)
    test_set = load_split(args.data, "test")
    _check_geometry(cfg, test_set)
    res = E.robustness_sweep(predictor, test_set, args.mode, ratios, exp.robust_sigma,
                             derive_seed(exp.seed, "robust"), cfg.horizons)
    res.to_csv(out, cfg.frame_rate)
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args, exp: ExperimentConfig) -> int:
    rep = gradcheck(exp)
    for name in sorted(rep.errors, key=rep.errors.get, reverse=True)[:5]:
        print(f"{rep.errors[name]:.3e}  {name}")
    print(f"relative error where |g| > 1e-6: {rep.resolvable:.3e}")
    print(f"absolute error elsewhere:       {rep.unresolved_abs:.3e}")
    name, worst = rep.worst
    print(f"max relative error {worst:.3e} ({name})")
    if args.strict:
        return 0 if worst < GRAD_TOLERANCE else 1
    return 0 if rep.passed() else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robust": cmd_robust,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads; defaults to $AUXF_THREADS, 1 gives bitwise reproducibility")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="auxformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate synthetic motion files")
    p.add_argument("--out", required=True, help="output data directory")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training report CSV (default: checkpoint path with .csv)")

    p = sub.add_parser("eval", parents=[common], help="per-horizon MPJPE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", help="comma-separated future frame indices (1-based)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", parents=[common], help="auxiliary-task ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="summary CSV; per-run and study tables go next to it")
    p.add_argument("--ratios", help="masking ratios for the p_m study ('' to skip)")
    p.add_argument("--structures", action="store_true", help="also compare attention structures")

    p = sub.add_parser("robust", parents=[common], help="test-time missing/noisy input sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["zero_velocity", "linear"])
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["missing", "noisy"], default="missing")
    p.add_argument("--ratios", help="comma-separated corruption ratios")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the training loss")
    p.add_argument("--strict", action="store_true",
                   help="fail on the raw elementwise relative error, including near-zero components")
    return parser


def _threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("AUXF_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"AUXF_THREADS={env!r} is not an integer") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        exp = load_config(args.config, overrides)
        with threadpool_limits(limits=_threads(args.threads)):
            return COMMANDS[args.command](args, exp)
    except (ConfigError, UsageError) as exc:
        print(f"auxformer {args.command}: {exc}", file=sys.stderr)
        return 2
    except (M.CheckpointError, S.MotionFileError) as exc:
        print(f"auxformer {args.command}: {exc}", file=sys.stderr)
        return 2
    except (tasks.TrainingDiverged, M.NumericError) as exc:
        print(f"auxformer {args.command}: training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
