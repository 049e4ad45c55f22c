"""Mask-aware spatial-temporal transformer with three coordinate heads.

Shapes follow the convention ``(B, T, J, C)``: batch, timestamps, joints,
channels. Every public function also accepts a single unbatched sequence
``(T, J, C)`` and returns the matching unbatched result.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tape, Tensor

HEADS = ("pred", "mask", "denoise")
MASKING_VARIANTS = ("post_softmax_literal", "pre_softmax_additive")
STRUCTURES = ("iterative", "separate", "no_osta")
_PROJ = ("q", "k", "v", "ffn1", "ffn2")


class NumericError(FloatingPointError):
    """Non-finite activations appeared inside the network."""


class MaskError(ValueError):
    """A mask or attention matrix is not binary or has the wrong shape."""


@dataclass(frozen=True)
class MotionSequence:
    """Joint coordinates in millimetres, ``coords[t, j] = (x, y, z)``."""

    coords: np.ndarray
    t_past: int
    t_future: int

    def __post_init__(self):
        c = np.ascontiguousarray(self.coords, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError(f"coords must have shape (T, J, 3), got {c.shape}")
        if self.t_past < 1 or self.t_future < 1 or self.t_past + self.t_future != c.shape[0]:
            raise ValueError(
                f"t_past={self.t_past}, t_future={self.t_future} inconsistent with T={c.shape[0]}"
            )
        if c.shape[1] < 1:
            raise ValueError("need at least one joint")
        c.flags.writeable = False
        object.__setattr__(self, "coords", c)

    @classmethod
    def from_past(cls, past: np.ndarray, t_future: int) -> MotionSequence:
        """Zero-pad observed frames out to the full horizon."""
        past = np.asarray(past, dtype=np.float64)
        pad = np.zeros((t_future,) + past.shape[1:])
        return cls(np.concatenate([past, pad]), past.shape[0], t_future)

    @property
    def T(self) -> int:
        return self.coords.shape[0]

    @property
    def J(self) -> int:
        return self.coords.shape[1]

    @property
    def past(self) -> np.ndarray:
        return self.coords[: self.t_past]

    @property
    def future(self) -> np.ndarray:
        return self.coords[self.t_past:]

    def padded(self) -> MotionSequence:
        """Copy with the future frames zeroed, i.e. what the predictor sees."""
        c = self.coords.copy()
        c[self.t_past:] = 0.0
        return MotionSequence(c, self.t_past, self.t_future)


def past_mask(t_past: int, t_future: int, n_joints: int) -> np.ndarray:
    """Observability mask that is 1 on past frames and 0 on future frames."""
    m = np.zeros((t_past + t_future, n_joints))
    m[:t_past] = 1.0
    return m


def check_mask(m: np.ndarray, shape: tuple[int, ...] | None = None) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if shape is not None and m.shape != shape:
        raise MaskError(f"mask shape {m.shape} does not match {shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise MaskError("mask entries must be 0 or 1")
    return m


@dataclass(frozen=True)
class HyperConfig:
    F: int = 16
    L: int = 1
    H: int = 2
    masking_variant: str = "post_softmax_literal"
    paper_literal_masked_update: bool = False
    prenorm: bool = False
    structure: str = "iterative"

    def __post_init__(self):
        if self.F < 1 or self.H < 1 or self.F % self.H:
            raise ValueError(f"F={self.F} must be a positive multiple of H={self.H}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.masking_variant not in MASKING_VARIANTS:
            raise ValueError(f"masking_variant must be one of {MASKING_VARIANTS}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")

    @property
    def head_dim(self) -> int:
        return self.F // self.H


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: HyperConfig, T: int, J: int) -> dict[str, tuple[int, ...]]:
    F = cfg.F
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.w": (3, F),
        "encoder.b": (F,),
        "dict.joint": (J, F),
        "dict.time": (T, F),
        "token.masked": (F,),
    }
    for layer in range(1, cfg.L + 1):
        for kind in ("osta", "fsta"):
            for axis in ("spatial", "temporal"):
                pre = f"layer{layer}.{kind}.{axis}"
                for p in ("q", "k", "v"):
                    shapes[f"{pre}.{p}.w"] = (F, F)
                    shapes[f"{pre}.{p}.b"] = (F,)
                shapes[f"{pre}.ffn1.w"] = (F, 2 * F)
                shapes[f"{pre}.ffn1.b"] = (2 * F,)
                shapes[f"{pre}.ffn2.w"] = (2 * F, F)
                shapes[f"{pre}.ffn2.b"] = (F,)
    for h in HEADS:
        shapes[f"head.{h}.w"] = (F, 3)
        shapes[f"head.{h}.b"] = (3,)
    return shapes


def init_params(cfg: HyperConfig, T: int, J: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Affine maps ~ U(+-1/sqrt(fan_in)); dictionaries and masked token ~ N(0, 0.02)."""
    params = {}
    shapes = param_shapes(cfg, T, J)
    for name, shape in shapes.items():
        if name.startswith(("dict.", "token.")):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            fan_in = shapes[name[:-1] + "w"][0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def as_tensors(params: Mapping[str, np.ndarray], tape: Tape | None = None) -> dict[str, Tensor]:
    out = {}
    for k, v in params.items():
        t = Tensor(v, name=k)
        out[k] = tape.watch(t) if tape is not None else t
    return out


def _block(P: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {f"{p}.{wb}": P[f"{prefix}.{p}.{wb}"] for p in _PROJ for wb in ("w", "b")}


def layer_block(P: Mapping[str, Tensor], layer: int, kind: str, axis: str) -> dict[str, Tensor]:
    """Weights of one attention sub-pass, keyed ``q.w``, ``ffn1.b`` etc."""
    return _block(P, f"layer{layer}.{kind}.{axis}")


# ---------------------------------------------------------------------------
# instrumentation

_probe = threading.local()


@contextlib.contextmanager
def softmax_probe(fn: Callable[[np.ndarray, np.ndarray], None]) -> Iterator[None]:
    """Call ``fn(weights, attend)`` with every attention softmax (before masking)."""
    stack = _probe.__dict__.setdefault("stack", [])
    stack.append(fn)
    try:
        yield
    finally:
        stack.pop()


def _notify(weights: np.ndarray, attend: np.ndarray) -> None:
    for fn in getattr(_probe, "stack", ()):
        fn(weights, attend)


# ---------------------------------------------------------------------------
# network pieces


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ValueError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


def coordinate_encode(x: np.ndarray | Tensor, P: Mapping[str, Tensor]) -> Tensor:
    """Map every 3-vector through the same affine encoder."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != 3:
        raise ValueError(f"coordinates must end in 3 components, got {x.shape}")
    return nx.affine(x, P["encoder.w"], P["encoder.b"])


def token_embed(e: Tensor, mask: np.ndarray, P: Mapping[str, Tensor]) -> Tensor:
    """Add timestamp and joint codes; masked positions drop ``e`` for the masked token."""
    batched = e.ndim == 4
    if not batched:
        e = nx.reshape(e, (1,) + e.shape)
    B, T, J, F = e.shape
    m = check_mask(mask)
    if m.ndim == 2:
        m = np.broadcast_to(m, (B, T, J))
    if m.shape != (B, T, J):
        raise MaskError(f"mask shape {m.shape} does not match features {e.shape}")
    if P["dict.time"].shape != (T, F) or P["dict.joint"].shape != (J, F):
        raise ValueError(
            f"dictionaries {P['dict.time'].shape}/{P['dict.joint'].shape} do not fit features {e.shape}"
        )
    keep = np.broadcast_to((m == 1.0)[..., None], (B, T, J, F))
    base = nx.where(keep, e, nx.expand(P["token.masked"], (B, T, J, F)))
    time_code = nx.transpose(nx.expand(P["dict.time"], (B, J, T, F)), (0, 2, 1, 3))
    joint_code = nx.expand(P["dict.joint"], (B, T, J, F))
    h = nx.add(nx.add(base, time_code), joint_code)
    return h if batched else nx.reshape(h, (T, J, F))


def _split_heads(x: Tensor, H: int) -> Tensor:
    N, n, F = x.shape
    return nx.transpose(nx.reshape(x, (N, n, H, F // H)), (0, 2, 1, 3))


def masked_attention(
    h: Tensor,
    attend: np.ndarray,
    block: Mapping[str, Tensor],
    cfg: HyperConfig,
) -> Tensor:
    """One residual multi-head attention update restricted by ``attend``.

    ``h`` is ``(n, F)`` or ``(N, n, F)``; ``attend`` is the matching binary
    ``(n, n)`` / ``(N, n, n)`` outer product of an observability vector with
    itself, whose diagonal therefore marks the observed rows.
    """
    unbatched = h.ndim == 2
    if unbatched:
        h = nx.reshape(h, (1,) + h.shape)
    N, n, F = h.shape
    a = np.asarray(attend, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.shape != (N, n, n):
        raise MaskError(f"attention matrix shape {a.shape} does not match features {h.shape}")
    if not np.all((a == 0.0) | (a == 1.0)):
        raise MaskError("attention matrix entries must be 0 or 1")
    H, d = cfg.H, cfg.head_dim
    observed = np.diagonal(a, axis1=1, axis2=2) == 1.0
    full = bool(observed.all())

    x = nx.layer_norm(h) if cfg.prenorm else h
    q = _split_heads(nx.affine(x, block["q.w"], block["q.b"]), H)
    k = _split_heads(nx.affine(x, block["k.w"], block["k.b"]), H)
    v = _split_heads(nx.affine(x, block["v.w"], block["v.b"]), H)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    a4 = np.broadcast_to(a[:, None], (N, H, n, n))
    if cfg.masking_variant == "pre_softmax_additive" and not full:
        weights = nx.softmax_rows(scores, key_mask=a4 == 1.0)
        _notify(weights.data, a4)
    else:
        weights = nx.softmax_rows(scores)
        _notify(weights.data, a4)
        if not full:
            weights = nx.mul(weights, Tensor(a4))
    o = nx.matmul(weights, v)
    o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (N, n, F))
    upd = nx.affine(nx.relu(nx.affine(o, block["ffn1.w"], block["ffn1.b"])), block["ffn2.w"], block["ffn2.b"])
    if not full and not cfg.paper_literal_masked_update:
        rows = np.broadcast_to(observed[..., None], (N, n, F))
        upd = nx.where(rows, upd, Tensor(np.zeros((N, n, F))))
    out = nx.add(h, upd)
    return nx.reshape(out, (n, F)) if unbatched else out


def _outer(obs: np.ndarray) -> np.ndarray:
    return obs[:, :, None] * obs[:, None, :]


def _as4(h: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray, bool]:
    unbatched = h.ndim == 3
    if unbatched:
        h = nx.reshape(h, (1,) + h.shape)
    B, T, J, _ = h.shape
    m = check_mask(mask)
    if m.ndim == 2:
        m = np.broadcast_to(m, (B, T, J))
    if m.shape != (B, T, J):
        raise MaskError(f"mask shape {m.shape} does not match features {h.shape}")
    return h, m, unbatched


def spatial_attention_pass(h: Tensor, mask: np.ndarray, block: Mapping[str, Tensor], cfg: HyperConfig) -> Tensor:
    """Attention across joints, independently at every timestamp."""
    h, m, unbatched = _as4(h, mask)
    B, T, J, F = h.shape
    flat = nx.reshape(h, (B * T, J, F))
    out = nx.reshape(masked_attention(flat, _outer(m.reshape(B * T, J)), block, cfg), (B, T, J, F))
    return nx.reshape(out, (T, J, F)) if unbatched else out


def temporal_attention_pass(h: Tensor, mask: np.ndarray, block: Mapping[str, Tensor], cfg: HyperConfig) -> Tensor:
    """Attention across timestamps, independently for every joint."""
    h, m, unbatched = _as4(h, mask)
    B, T, J, F = h.shape
    flat = nx.reshape(nx.transpose(h, (0, 2, 1, 3)), (B * J, T, F))
    obs = m.transpose(0, 2, 1).reshape(B * J, T)
    out = masked_attention(flat, _outer(obs), block, cfg)
    out = nx.transpose(nx.reshape(out, (B, J, T, F)), (0, 2, 1, 3))
    return nx.reshape(out, (T, J, F)) if unbatched else out


def _spatial_temporal(h, mask, P, layer, kind, cfg):
    h = spatial_attention_pass(h, mask, layer_block(P, layer, kind, "spatial"), cfg)
    return temporal_attention_pass(h, mask, layer_block(P, layer, kind, "temporal"), cfg)


def osta_layer(h: Tensor, mask: np.ndarray, P: Mapping[str, Tensor], layer: int, cfg: HyperConfig) -> Tensor:
    """Observed-only attention: only positions with mask 1 interact or change."""
    return _spatial_temporal(h, mask, P, layer, "osta", cfg)


def fsta_layer(h: Tensor, P: Mapping[str, Tensor], layer: int, cfg: HyperConfig) -> Tensor:
    """Full attention over every position (all-ones mask), own weights."""
    shape = h.shape[:-1]
    return _spatial_temporal(h, np.ones(shape), P, layer, "fsta", cfg)


def _finite(h: Tensor, where: str) -> Tensor:
    if not np.isfinite(h.data).all():
        raise NumericError(f"non-finite activations after {where}")
    return h


def backbone(x: np.ndarray, mask: np.ndarray, P: Mapping[str, Tensor], cfg: HyperConfig) -> Tensor:
    """Encode, embed and run the attention stack; returns ``(B, T, J, F)`` features."""
    x, _ = _batched(x, 4)
    B, T, J, _ = x.shape
    m = check_mask(mask)
    if m.ndim == 2:
        m = np.broadcast_to(m, (B, T, J))
    h = _finite(token_embed(coordinate_encode(x, P), m, P), "token embedding")
    L = cfg.L
    if cfg.structure == "iterative":
        schedule = [(layer, kind) for layer in range(1, L + 1) for kind in ("osta", "fsta")]
    elif cfg.structure == "separate":
        schedule = [(layer, "osta") for layer in range(1, L + 1)] + [(layer, "fsta") for layer in range(1, L + 1)]
    else:
        schedule = [(layer, "fsta") for layer in range(1, L + 1)]
    for layer, kind in schedule:
        if kind == "osta":
            h = osta_layer(h, m, P, layer, cfg)
        else:
            h = fsta_layer(h, P, layer, cfg)
        _finite(h, f"layer{layer}.{kind}")
    return h


def apply_head(h: Tensor, P: Mapping[str, Tensor], head: str) -> Tensor:
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
    return nx.affine(h, P[f"head.{head}.w"], P[f"head.{head}.b"])


def forward(
    x: np.ndarray | MotionSequence,
    mask: np.ndarray,
    head: str,
    P: Mapping[str, Tensor],
    cfg: HyperConfig,
) -> Tensor:
    """Coordinates ``(B, T, J, 3)`` or ``(T, J, 3)`` to the chosen head's output."""
    coords = x.coords if isinstance(x, MotionSequence) else np.asarray(x, dtype=np.float64)
    xb, unbatched = _batched(coords, 4)
    out = apply_head(backbone(xb, mask, P, cfg), P, head)
    return nx.reshape(out, out.shape[1:]) if unbatched else out


def predict_future(x_past: MotionSequence, params: Mapping[str, np.ndarray | Tensor], cfg: HyperConfig) -> np.ndarray:
    """Future frames ``(T_f, J, 3)`` from the prediction head under the past-only mask."""
    P = {k: v if isinstance(v, Tensor) else Tensor(v, name=k) for k, v in params.items()}
    x = x_past.padded()
    m = past_mask(x.t_past, x.t_future, x.J)
    return forward(x, m, "pred", P, cfg).data[x.t_past:].copy()


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_MAGIC = b"AUXF1"


class CheckpointError(ValueError):
    """Malformed or truncated parameter checkpoint."""


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    """Write parameters to ``path`` via a temporary file and rename."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: missing AUXF1 magic")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr
    return out


def check_params(params: Mapping[str, np.ndarray], cfg: HyperConfig, T: int, J: int) -> None:
    """Raise if ``params`` does not have exactly the layout ``cfg`` implies."""
    want = param_shapes(cfg, T, J)
    if set(params) != set(want):
        missing = sorted(set(want) - set(params))
        extra = sorted(set(params) - set(want))
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, shape in want.items():
        if tuple(params[k].shape) != shape:
            raise CheckpointError(f"{k}: shape {params[k].shape}, expected {shape}")


@dataclass
class ShapeInfo:
    """Sequence geometry implied by a parameter set."""

    T: int
    J: int
    F: int
    L: int


def infer_shape(params: Mapping[str, np.ndarray]) -> ShapeInfo:
    T, F = params["dict.time"].shape
    J = params["dict.joint"].shape[0]
    L = len({k.split(".")[0] for k in params if k.startswith("layer")})
    return ShapeInfo(T=T, J=J, F=F, L=L)
