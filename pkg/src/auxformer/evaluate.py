"""MPJPE, trivial baselines, gap filling and the corrupted-input robustness sweep."""

from __future__ import annotations

import csv
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from .model import HyperConfig, MotionSequence
from .numerics import Tensor
from .rng import stream


def mpjpe(pred: np.ndarray, gt: np.ndarray, horizon: int) -> float:
    """Mean joint distance at future frame ``horizon`` (1-based)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} must both be (T_f, J, 3)")
    if not 1 <= horizon <= pred.shape[0]:
        raise ValueError(f"horizon {horizon} outside 1..{pred.shape[0]}")
    d = pred[horizon - 1] - gt[horizon - 1]
    return float(np.sqrt((d * d).sum(axis=-1)).mean())


def mpjpe_per_horizon(preds: np.ndarray, seqs: Sequence[MotionSequence], horizons: Sequence[int]) -> dict[int, float]:
    """Average MPJPE over samples for each horizon; ``preds`` is ``(N, T_f, J, 3)``."""
    out = {}
    for h in horizons:
        out[h] = float(np.mean([mpjpe(p, x.future, h) for p, x in zip(preds, seqs)]))
    return out


def zero_velocity_baseline(x_past: np.ndarray | MotionSequence, t_future: int | None = None) -> np.ndarray:
    if isinstance(x_past, MotionSequence):
        t_future = x_past.t_future if t_future is None else t_future
        x_past = x_past.past
    return np.repeat(np.asarray(x_past)[-1:], t_future, axis=0)


def linear_extrapolation_baseline(x_past: np.ndarray | MotionSequence, t_future: int | None = None) -> np.ndarray:
    if isinstance(x_past, MotionSequence):
        t_future = x_past.t_future if t_future is None else t_future
        x_past = x_past.past
    x_past = np.asarray(x_past)
    last = x_past[-1]
    vel = last - x_past[-2] if len(x_past) > 1 else np.zeros_like(last)
    steps = np.arange(1, t_future + 1, dtype=np.float64)[:, None, None]
    return last[None] + steps * vel[None]


def fill_missing_linear(x: MotionSequence, observed: np.ndarray) -> MotionSequence:
    """Fill unobserved past coordinates by per-joint linear inter/extrapolation.

    Only the past frames are repaired; future frames are returned untouched.
    A joint with a single observed frame is held constant at that value, and
    one with none is set to zero.
    """
    obs = M.check_mask(observed, (x.T, x.J))[: x.t_past] == 1.0
    c = x.coords.copy()
    past = c[: x.t_past]
    t = np.arange(x.t_past, dtype=np.float64)
    for j in range(x.J):
        known = np.flatnonzero(obs[:, j])
        if len(known) == x.t_past:
            continue
        if len(known) == 0:
            past[:, j] = 0.0
            continue
        if len(known) == 1:
            past[:, j] = past[known[0], j]
            continue
        vals = past[known, j]
        filled = np.empty((x.t_past, 3))
        for k in range(3):
            filled[:, k] = np.interp(t, known, vals[:, k])
        lo, hi = known[0], known[-1]
        slope_lo = (vals[1] - vals[0]) / (known[1] - known[0])
        slope_hi = (vals[-1] - vals[-2]) / (known[-1] - known[-2])
        before = t < lo
        after = t > hi
        filled[before] = vals[0] + (t[before] - lo)[:, None] * slope_lo
        filled[after] = vals[-1] + (t[after] - hi)[:, None] * slope_hi
        missing = ~obs[:, j]
        past[missing, j] = filled[missing]
    return MotionSequence(c, x.t_past, x.t_future)


# ---------------------------------------------------------------------------
# predictors


def predict_batch(
    params: Mapping[str, np.ndarray],
    hyper: HyperConfig,
    seqs: Sequence[MotionSequence],
    input_scale: float,
    observed: np.ndarray | None = None,
    chunk: int = 64,
) -> np.ndarray:
    """Model forecasts in millimetres, ``(N, T_f, J, 3)``.

    ``observed`` (``(N, T, J)``) defaults to the past-only mask; coordinates
    are taken from ``seqs`` as given, with future frames zeroed.
    """
    P = {k: Tensor(v, name=k) for k, v in params.items()}
    t_past = seqs[0].t_past
    x = np.stack([s.padded().coords for s in seqs]) * input_scale
    if observed is None:
        observed = np.broadcast_to(M.past_mask(t_past, seqs[0].t_future, seqs[0].J), x.shape[:-1])
    outs = []
    for i in range(0, len(seqs), chunk):
        y = M.forward(x[i:i + chunk], observed[i:i + chunk], "pred", P, hyper).data
        outs.append(y[:, t_past:] / input_scale)
    return np.concatenate(outs)


@dataclass
class ModelPredictor:
    params: Mapping[str, np.ndarray]
    hyper: HyperConfig
    input_scale: float
    name: str = "model"

    def predict(self, seqs: Sequence[MotionSequence], observed: np.ndarray) -> np.ndarray:
        return predict_batch(self.params, self.hyper, seqs, self.input_scale, observed)


@dataclass
class BaselinePredictor:
    """Classical predictor; missing inputs are repaired by linear filling first."""

    fn: Callable[[MotionSequence], np.ndarray]
    name: str = "baseline"

    def predict(self, seqs: Sequence[MotionSequence], observed: np.ndarray) -> np.ndarray:
        out = []
        for x, obs in zip(seqs, observed):
            if not obs[: x.t_past].all():
                x = fill_missing_linear(x, obs)
            out.append(self.fn(x))
        return np.stack(out)


def evaluate(predictor, seqs: Sequence[MotionSequence], horizons: Sequence[int]) -> dict[int, float]:
    """Clean-input MPJPE per horizon."""
    return robustness_sweep(predictor, seqs, "missing", [0.0], 0.0, 0, horizons).mpjpe[0.0]


@dataclass
class SweepResult:
    mode: str
    seed: int
    n_samples: int
    mpjpe: dict[float, dict[int, float]]

    def rows(self, frame_rate: float) -> list[tuple]:
        return [
            (r, h * 1000.0 / frame_rate, e, self.n_samples, self.seed)
            for r, per_h in self.mpjpe.items()
            for h, e in per_h.items()
        ]

    def to_csv(self, path: str | Path, frame_rate: float) -> None:
        write_rows(path, ("ratio", "horizon_ms", "mpjpe", "n_samples", "seed"), self.rows(frame_rate))


def write_rows(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    tmp.replace(path)


def robustness_sweep(
    predictor,
    testset: Sequence[MotionSequence],
    mode: str,
    ratios: Sequence[float],
    sigma: float,
    seed: int,
    horizons: Sequence[int],
) -> SweepResult:
    """Per-horizon MPJPE when a ``ratio`` share of past coordinates is dropped or noised.

    Each sample draws one uniform per past coordinate (and one noise vector)
    from its own stream, so a coordinate corrupted at one ratio stays
    corrupted at every larger ratio.
    """
    if mode not in ("missing", "noisy"):
        raise ValueError(f"mode must be 'missing' or 'noisy', got {mode!r}")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"ratio {r} outside [0, 1]")
    draws = []
    for i, x in enumerate(testset):
        g = stream(seed, "robust", mode, i)
        draws.append((g.random((x.t_past, x.J)), g.normal(0.0, 1.0, size=(x.t_past, x.J, 3))))
    table = {}
    for r in ratios:
        seqs, observed = [], []
        for x, (u, z) in zip(testset, draws):
            hit = u < r
            obs = M.past_mask(x.t_past, x.t_future, x.J)
            c = x.coords.copy()
            if mode == "missing":
                obs[: x.t_past][hit] = 0.0
                c[: x.t_past][hit] = 0.0
            else:
                c[: x.t_past][hit] += sigma * z[hit]
            seqs.append(MotionSequence(c, x.t_past, x.t_future) if hit.any() else x)
            observed.append(obs)
        preds = predictor.predict(seqs, np.stack(observed))
        table[float(r)] = mpjpe_per_horizon(preds, testset, horizons)
    return SweepResult(mode, seed, len(testset), table)
