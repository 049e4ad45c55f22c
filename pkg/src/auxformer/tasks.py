"""Corruption, the three task losses and the joint training loop."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import numerics as nx
from .evaluate import predict_batch, mpjpe_per_horizon
from .model import HyperConfig, MotionSequence
from .numerics import Tape, Tensor
from .rng import stream

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class CorruptionSpec:
    p_m: float = 0.5
    p_n: float = 0.3
    sigma: float = 50.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_m", "p_n"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    input_scale: float = 0.01
    squared_loss: bool = True
    mask_past_only: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.input_scale <= 0:
            raise ValueError("learning_rate and input_scale must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")


# ---------------------------------------------------------------------------
# masks and corruption


def build_task_masks(t_past: int, t_future: int, J: int, spec: CorruptionSpec, rng: np.random.Generator):
    """Return ``(M_P, M_M, M_D)``; ``M_M`` drops each past entry with probability ``p_m``."""
    if min(t_past, t_future, J) < 1:
        raise ValueError("dimensions must be >= 1")
    m_p = M.past_mask(t_past, t_future, J)
    drop = rng.random((t_past, J)) < spec.p_m
    m_m = m_p.copy()
    m_m[:t_past][drop] = 0.0
    return m_p, m_m, m_p.copy()


def corrupt_by_masking(x: MotionSequence, m_m: np.ndarray) -> MotionSequence:
    m = M.check_mask(m_m, (x.T, x.J))
    c = x.coords.copy()
    c[: x.t_past][m[: x.t_past] == 0.0] = 0.0
    return MotionSequence(c, x.t_past, x.t_future)


def corrupt_by_noising(x: MotionSequence, spec: CorruptionSpec, rng: np.random.Generator):
    """Add N(0, sigma) to every component of a random ``p_n`` share of past coordinates.

    Returns the noisy sequence and the boolean ``(T, J)`` set of noised entries.
    """
    chosen = np.zeros((x.T, x.J), dtype=bool)
    chosen[: x.t_past] = rng.random((x.t_past, x.J)) < spec.p_n
    noise = rng.normal(0.0, 1.0, size=(x.t_past, x.J, 3)) * spec.sigma
    c = x.coords.copy()
    sel = chosen[: x.t_past]
    c[: x.t_past][sel] += noise[sel]
    return MotionSequence(c, x.t_past, x.t_future), chosen


# ---------------------------------------------------------------------------
# losses


def supervised_error(xhat: Tensor, target: np.ndarray, select: np.ndarray, squared: bool = True) -> Tensor:
    """Mean over selected ``(t, j)`` of the per-joint error, averaged over the batch.

    ``select`` is boolean ``(T, J)`` or ``(B, T, J)``. A sample with nothing
    selected contributes zero.
    """
    target = np.asarray(target, dtype=np.float64)
    if xhat.shape != target.shape:
        raise nx.ShapeError(f"prediction {xhat.shape} vs target {target.shape}")
    sel = np.asarray(select, dtype=bool)
    if sel.shape != xhat.shape[:-1]:
        raise nx.ShapeError(f"selection {sel.shape} vs prediction {xhat.shape}")
    diff = nx.sub(xhat, Tensor(target))
    per_joint = nx.sum_last(nx.square(diff)) if squared else nx.norm_last(diff)
    if sel.ndim == 2:
        w = sel / max(int(sel.sum()), 1)
    else:
        counts = sel.reshape(sel.shape[0], -1).sum(axis=1)
        w = sel / np.maximum(counts, 1)[:, None, None] / sel.shape[0]
    return nx.weighted_sum(per_joint, w)


def _time_select(T: int, J: int, t_past: int, future: bool) -> np.ndarray:
    s = np.zeros((T, J), dtype=bool)
    if future:
        s[t_past:] = True
    else:
        s[:t_past] = True
    return s


def loss_prediction(xhat: Tensor, x: MotionSequence, squared: bool = True) -> Tensor:
    """Error over future frames, normalised by ``T_f * J``."""
    return supervised_error(xhat, x.coords, _time_select(x.T, x.J, x.t_past, True), squared)


def mask_select(m_m: np.ndarray, t_past: int, past_only: bool = False) -> np.ndarray:
    sel = np.asarray(m_m) == 0.0
    if past_only:
        sel = sel.copy()
        sel[..., t_past:, :] = False
    return sel


def loss_mask(xhat: Tensor, x: MotionSequence, m_m: np.ndarray, squared: bool = True, past_only: bool = False) -> Tensor:
    """Error over the masking set ``{(t, j) : M_M = 0}`` (future included unless ``past_only``)."""
    return supervised_error(xhat, x.coords, mask_select(m_m, x.t_past, past_only), squared)


def loss_denoise(xhat: Tensor, x: MotionSequence, squared: bool = True) -> Tensor:
    """Error over past frames, normalised by ``T_p * J``."""
    return supervised_error(xhat, x.coords, _time_select(x.T, x.J, x.t_past, False), squared)


# ---------------------------------------------------------------------------
# batched three-branch objective


@dataclass
class TaskBatch:
    """Scaled inputs, targets and masks for the three branches of one batch."""

    target: np.ndarray
    inputs: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    t_past: int


def make_task_batch(
    seqs: Sequence[MotionSequence],
    spec: CorruptionSpec,
    rngs: Sequence[np.random.Generator],
    input_scale: float,
) -> TaskBatch:
    """Corrupt each sample with its own stream; noise is drawn in millimetres before scaling."""
    t_past = seqs[0].t_past
    xs, xm, xd, mp, mm, md = [], [], [], [], [], []
    for x, rng in zip(seqs, rngs):
        if x.t_past != t_past or x.T != seqs[0].T or x.J != seqs[0].J:
            raise ValueError("all sequences in a batch need the same geometry")
        clean = x.padded()
        m_p, m_m, m_d = build_task_masks(x.t_past, x.t_future, x.J, spec, rng)
        noisy, _ = corrupt_by_noising(clean, spec, rng)
        xs.append(clean.coords)
        xm.append(corrupt_by_masking(clean, m_m).coords)
        xd.append(noisy.coords)
        mp.append(m_p)
        mm.append(m_m)
        md.append(m_d)
    return TaskBatch(
        target=np.stack([x.coords for x in seqs]) * input_scale,
        inputs={"pred": np.stack(xs) * input_scale, "mask": np.stack(xm) * input_scale,
                "denoise": np.stack(xd) * input_scale},
        masks={"pred": np.stack(mp), "mask": np.stack(mm), "denoise": np.stack(md)},
        t_past=t_past,
    )


def task_losses(
    batch: TaskBatch,
    P: Mapping[str, Tensor],
    hyper: HyperConfig,
    weights: LossWeights,
    squared: bool = True,
    mask_past_only: bool = False,
    skip_inactive: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Total loss and its breakdown; the three branches share one backbone pass.

    With ``skip_inactive`` a branch whose weight is zero is not evaluated and
    reported as NaN.
    """
    active = ["pred"]
    for name, w in (("mask", weights.alpha1), ("denoise", weights.alpha2)):
        if w > 0 or not skip_inactive:
            active.append(name)
    B, T, J, _ = batch.target.shape
    x = np.concatenate([batch.inputs[k] for k in active])
    m = np.concatenate([batch.masks[k] for k in active])
    feats = M.backbone(x, m, P, hyper)
    future = np.broadcast_to(_time_select(T, J, batch.t_past, True), (B, T, J))
    past = np.broadcast_to(_time_select(T, J, batch.t_past, False), (B, T, J))
    selects = {
        "pred": future,
        "mask": mask_select(batch.masks["mask"], batch.t_past, mask_past_only),
        "denoise": past,
    }
    terms: dict[str, Tensor] = {}
    for i, name in enumerate(active):
        out = M.apply_head(nx.slice_rows(feats, i * B, (i + 1) * B), P, name)
        terms[name] = supervised_error(out, batch.target, selects[name], squared)
    total = terms["pred"]
    for name, w in (("mask", weights.alpha1), ("denoise", weights.alpha2)):
        if name in terms and w != 0:
            total = nx.add(total, nx.scale(terms[name], w))
    breakdown = {"pred": terms["pred"].item()}
    for name in ("mask", "denoise"):
        breakdown[name] = terms[name].item() if name in terms else math.nan
    breakdown["total"] = total.item()
    return total, breakdown


def total_loss(
    x: MotionSequence,
    params: Mapping[str, np.ndarray | Tensor],
    spec: CorruptionSpec,
    weights: LossWeights,
    rng: np.random.Generator,
    cfg: HyperConfig,
    train: TrainConfig = TrainConfig(),
) -> tuple[Tensor, dict[str, float]]:
    """Three-task objective for a single sequence (pred + a1*mask + a2*denoise)."""
    P = {k: v if isinstance(v, Tensor) else Tensor(v, name=k) for k, v in params.items()}
    batch = make_task_batch([x], spec, [rng], train.input_scale)
    return task_losses(batch, P, cfg, weights, train.squared_loss, train.mask_past_only)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(p)) + (1.0 - b2) * (g * g)
        new_p[k] = p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


@dataclass
class TrainReport:
    horizons: tuple[int, ...]
    frame_rate: float
    rows: list[dict[str, float]] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["epoch", "loss_total", "loss_pred", "loss_mask", "loss_denoise"] + [
            f"val_mpjpe@{h}" for h in self.horizons
        ]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.columns[1:]])
        tmp.replace(path)


def _batch_gradients(batch, params, hyper, weights, cfg):
    with Tape() as tape:
        P = M.as_tensors(params, tape)
        loss, parts = task_losses(batch, P, hyper, weights, cfg.squared_loss, cfg.mask_past_only, skip_inactive=True)
    return tape.backward(loss), parts


def train(
    dataset: Sequence[MotionSequence],
    params: Mapping[str, np.ndarray],
    spec: CorruptionSpec,
    weights: LossWeights,
    cfg: TrainConfig,
    hyper: HyperConfig,
    seed: int,
    val: Sequence[MotionSequence] = (),
    horizons: Sequence[int] = (),
    frame_rate: float = 25.0,
) -> tuple[dict[str, np.ndarray], TrainReport]:
    """Minibatch Adam on the joint objective; fresh corruption per sample per epoch."""
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    report = TrainReport(tuple(horizons), frame_rate)
    state = AdamState()
    n = len(dataset)
    for epoch in range(1, cfg.epochs + 1):
        order = stream(seed, "shuffle", epoch).permutation(n)
        sums = {"total": 0.0, "pred": 0.0, "mask": 0.0, "denoise": 0.0}
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            rngs = [stream(spec.seed, "corrupt", epoch, int(i)) for i in idx]
            batch = make_task_batch([dataset[i] for i in idx], spec, rngs, cfg.input_scale)
            grads, parts = _batch_gradients(batch, params, hyper, weights, cfg)
            if not math.isfinite(parts["total"]):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            params, state = adam_step(params, grads, state, cfg)
            for k in sums:
                sums[k] += parts[k] * len(idx)
        row = {"epoch": epoch}
        row.update({f"loss_{k}": v / n for k, v in sums.items()})
        if val and horizons:
            errs = mpjpe_per_horizon(predict_batch(params, hyper, val, cfg.input_scale), val, horizons)
            row.update({f"val_mpjpe@{h}": e for h, e in errs.items()})
        else:
            row.update({f"val_mpjpe@{h}": math.nan for h in horizons})
        report.rows.append(row)
        log.info("epoch %d loss %.5f", epoch, row["loss_total"])
    return params, report
