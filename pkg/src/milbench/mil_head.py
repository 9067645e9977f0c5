"""Attention-pooled MIL classification head with hand-derived gradients.

One tanh-attention query scores all K*L tokens of a bag jointly:

    s_t   = w . tanh(V e_t + b)
    alpha = softmax(s)            (max-subtracted)
    z     = sum_t alpha_t e_t
    p     = softmax(W_fc z + b_fc)

Setting w = 0 makes alpha uniform, which recovers the mean-pooling baseline
exactly. Training minimizes the class-weighted log loss; gradients are exact
analytic derivatives through softmax, the fully connected layer, the pooling
simplex and the tanh attention, computed in float64 and checked against
central finite differences in the test suite.

Class index convention throughout: 0 = CE, 1 = LAA.

MILW weight file layout (little-endian): magic "MILW", u16 version = 1,
u32 D, u32 D_att, u32 K, u32 L, then V, b, w, W_fc, b_fc as float32 in that
order, row-major.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import binio, evalkit
from .embedder import EmbeddingBag
from .rng import SeededRng

MILW_MAGIC = b"MILW"
MILW_VERSION = 1

N_CLASSES = 2

PREDICTIONS_HEADER = ["slide_id", "p_CE", "p_LAA"]


@dataclass
class AttentionPoolParams:
    V: np.ndarray = field(repr=False)  # (D_att, D)
    b: np.ndarray = field(repr=False)  # (D_att,)
    w: np.ndarray = field(repr=False)  # (D_att,)


@dataclass
class ClassifierParams:
    W_fc: np.ndarray = field(repr=False)  # (2, D)
    b_fc: np.ndarray = field(repr=False)  # (2,)


@dataclass
class HeadParams:
    pool: AttentionPoolParams
    cls: ClassifierParams

    @property
    def dim(self) -> int:
        return self.pool.V.shape[1]

    @property
    def attention_dim(self) -> int:
        return self.pool.V.shape[0]

    def copy(self) -> "HeadParams":
        return HeadParams(
            AttentionPoolParams(self.pool.V.copy(), self.pool.b.copy(), self.pool.w.copy()),
            ClassifierParams(self.cls.W_fc.copy(), self.cls.b_fc.copy()),
        )

    def arrays(self) -> list[np.ndarray]:
        return [self.pool.V, self.pool.b, self.pool.w, self.cls.W_fc, self.cls.b_fc]


@dataclass
class HeadGrads:
    V: np.ndarray
    b: np.ndarray
    w: np.ndarray
    W_fc: np.ndarray
    b_fc: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.V, self.b, self.w, self.W_fc, self.b_fc]

    def scaled(self, c: float) -> "HeadGrads":
        return HeadGrads(*(c * a for a in self.arrays()))

    def add_(self, other: "HeadGrads") -> None:
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += theirs


@dataclass
class ForwardTrace:
    alpha: np.ndarray  # (K*L,) attention simplex
    z: np.ndarray  # (D,) pooled embedding
    logits: np.ndarray  # (2,)
    probs: np.ndarray  # (2,) class simplex


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 200
    seed: int = 0
    class_weights: tuple[float, float] = (1.0, 1.0)
    prob_clip: float = 1e-15
    attention_dim: int = 64

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.prob_clip < 0.5:
            raise ValueError("prob_clip must be in (0, 0.5)")
        if self.attention_dim < 1:
            raise ValueError("attention_dim must be >= 1")
        if min(self.class_weights) <= 0:
            raise ValueError("class_weights must be positive")


def _tokens(bag) -> np.ndarray:
    """Flatten a bag (EmbeddingBag or array) to a (K*L, D) float64 matrix."""
    data = bag.data if isinstance(bag, EmbeddingBag) else np.asarray(bag)
    if data.ndim == 3:
        data = data.reshape(-1, data.shape[-1])
    if data.ndim != 2:
        raise ValueError(f"bag must be (K, L, D) or (T, D), got shape {data.shape}")
    return data.astype(np.float64)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def init_head_params(dim: int, attention_dim: int, seed: int) -> HeadParams:
    """Seeded init: V and w uniform(+/- 1/sqrt(fan_in)), everything else zero.

    The classifier starts at zero so an untrained head emits exactly
    (0.5, 0.5); first-epoch gradients through W_fc are nonzero regardless.
    """
    rng = SeededRng(seed)
    v_lim = 1.0 / np.sqrt(dim)
    w_lim = 1.0 / np.sqrt(attention_dim)
    V = rng.uniform_array(attention_dim * dim, -v_lim, v_lim).reshape(attention_dim, dim)
    w = rng.uniform_array(attention_dim, -w_lim, w_lim)
    return HeadParams(
        AttentionPoolParams(V, np.zeros(attention_dim), w),
        ClassifierParams(np.zeros((N_CLASSES, dim)), np.zeros(N_CLASSES)),
    )


def zero_grads(params: HeadParams) -> HeadGrads:
    return HeadGrads(*(np.zeros_like(a) for a in params.arrays()))


def attention_pool(bag, pool: AttentionPoolParams) -> tuple[np.ndarray, np.ndarray]:
    """Pooled embedding z and attention weights alpha over all K*L tokens."""
    tokens = _tokens(bag)
    if not np.all(np.isfinite(tokens)):
        raise binio.PayloadError("non-finite token embeddings")
    hidden = np.tanh(tokens @ pool.V.T + pool.b)
    scores = hidden @ pool.w
    alpha = _softmax(scores)
    return alpha @ tokens, alpha


def head_forward(bag, pool: AttentionPoolParams, cls: ClassifierParams) -> ForwardTrace:
    z, alpha = attention_pool(bag, pool)
    logits = cls.W_fc @ z + cls.b_fc
    return ForwardTrace(alpha=alpha, z=z, logits=logits, probs=_softmax(logits))


def sample_loss(bag, params: HeadParams, target: int, weight: float = 1.0) -> float:
    """weight * (-ln p_target), computed via log-softmax for FD stability."""
    trace = head_forward(bag, params.pool, params.cls)
    logits = trace.logits
    log_p = logits[target] - (logits.max() + np.log(np.exp(logits - logits.max()).sum()))
    return -weight * float(log_p)


def head_backward(bag, params: HeadParams, trace: ForwardTrace,
                  target: int, weight: float = 1.0) -> HeadGrads:
    """Exact gradients of weight * (-ln p_target) for every head parameter."""
    if target not in (0, 1):
        raise ValueError(f"target class must be 0 (CE) or 1 (LAA), got {target}")
    tokens = _tokens(bag)
    pool, cls = params.pool, params.cls

    hidden = np.tanh(tokens @ pool.V.T + pool.b)  # (T, A)
    alpha = _softmax(hidden @ pool.w)
    z = alpha @ tokens
    probs = _softmax(cls.W_fc @ z + cls.b_fc)
    if not (np.allclose(alpha, trace.alpha, atol=1e-8)
            and np.allclose(probs, trace.probs, atol=1e-8)):
        raise ValueError("trace does not match forward pass on these inputs")

    onehot = np.zeros(N_CLASSES)
    onehot[target] = 1.0
    dlogits = weight * (probs - onehot)

    g_W_fc = np.outer(dlogits, z)
    g_b_fc = dlogits
    dz = cls.W_fc.T @ dlogits

    dalpha = tokens @ dz
    dscores = alpha * (dalpha - alpha @ dalpha)  # softmax Jacobian

    g_w = hidden.T @ dscores
    dpre = np.outer(dscores, pool.w) * (1.0 - hidden * hidden)  # through tanh
    g_V = dpre.T @ tokens
    g_b = dpre.sum(axis=0)
    return HeadGrads(g_V, g_b, g_w, g_W_fc, g_b_fc)


def sgd_step(params: HeadParams, grads: HeadGrads, cfg: TrainConfig,
             velocity: HeadGrads | None = None) -> HeadGrads:
    """Classical momentum update in place: v <- mu*v + g; theta <- theta - lr*v.

    Returns the updated velocity (zeros are created when none is passed).
    """
    if velocity is None:
        velocity = zero_grads(params)
    for theta, v, g in zip(params.arrays(), velocity.arrays(), grads.arrays()):
        if theta.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {theta.shape}")
        v *= cfg.momentum
        v += g
        theta -= cfg.learning_rate * v
    return velocity


@dataclass
class TrainResult:
    params: HeadParams
    train_losses: list[float]
    val_losses: list[float]


def _dataset_loss(bags, labels, params, cfg: TrainConfig) -> float:
    probs = np.stack([head_forward(b, params.pool, params.cls).probs for b in bags])
    return evalkit.weighted_log_loss(labels, probs, cfg.class_weights, cfg.prob_clip)


def train_fold(train_bags: list, train_labels, val_bags: list, val_labels,
               cfg: TrainConfig, pooling: str = "attention") -> TrainResult:
    """Full-batch gradient descent on the weighted log loss of the train split.

    The per-epoch gradient is the exact gradient of the reported metric: each
    sample's head_backward is scaled by w_c / (N_c * sum(w)) for its class c.
    ``pooling="mean"`` freezes the attention parameters at w = 0, i.e. the
    uniform-pooling baseline; only the classifier trains.
    """
    cfg.validate()
    if pooling not in ("attention", "mean"):
        raise ValueError(f"pooling must be 'attention' or 'mean', got {pooling!r}")
    train_labels = np.asarray(train_labels, dtype=int)
    val_labels = np.asarray(val_labels, dtype=int)
    counts = np.bincount(train_labels, minlength=N_CLASSES)
    if np.any(counts == 0):
        raise ValueError(f"every class needs at least one training sample, got counts {counts}")

    params = init_head_params(train_bags[0].dim if isinstance(train_bags[0], EmbeddingBag)
                              else np.asarray(train_bags[0]).shape[-1],
                              cfg.attention_dim, cfg.seed)
    if pooling == "mean":
        params.pool.w[:] = 0.0

    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    scale = weights / (counts * weights.sum())  # d(weighted_log_loss)/d sample

    velocity = zero_grads(params)
    train_losses, val_losses = [], []
    for _ in range(cfg.epochs):
        total = zero_grads(params)
        for bag, label in zip(train_bags, train_labels):
            trace = head_forward(bag, params.pool, params.cls)
            total.add_(head_backward(bag, params, trace, int(label), scale[label]))
        if pooling == "mean":
            total.V[:] = 0.0
            total.b[:] = 0.0
            total.w[:] = 0.0
        velocity = sgd_step(params, total, cfg, velocity)
        train_losses.append(_dataset_loss(train_bags, train_labels, params, cfg))
        val_losses.append(_dataset_loss(val_bags, val_labels, params, cfg))
    return TrainResult(params, train_losses, val_losses)


def predict(bags: list[EmbeddingBag], params: HeadParams) -> list[tuple[str, float, float]]:
    """Per-slide (slide_id, p_CE, p_LAA); probabilities are never clipped."""
    out = []
    for bag in bags:
        if bag.dim != params.dim:
            raise ValueError(
                f"bag {bag.slide_id} has dim {bag.dim}, head was trained with {params.dim}"
            )
        probs = head_forward(bag, params.pool, params.cls).probs
        out.append((bag.slide_id, float(probs[0]), float(probs[1])))
    return out


def save_head_params(params: HeadParams, path: str, k: int = 0, l: int = 0) -> None:
    dims = (params.dim, params.attention_dim, k, l)
    blob = binio.pack_header(MILW_MAGIC, MILW_VERSION, dims)
    for arr in params.arrays():
        blob += binio.f32_bytes(arr.reshape(-1))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_head_params(path: str) -> tuple[HeadParams, tuple[int, int]]:
    """Returns (params, (K, L)) recorded in the container."""
    with open(path, "rb") as fh:
        reader = binio.Reader(fh.read(), source=path)
    reader.expect_magic(MILW_MAGIC, MILW_VERSION)
    d, d_att, k, l = reader.read_u32s(4)
    V = reader.read_f32_array(d_att * d, "V").reshape(d_att, d).astype(np.float64)
    b = reader.read_f32_array(d_att, "b").astype(np.float64)
    w = reader.read_f32_array(d_att, "w").astype(np.float64)
    W_fc = reader.read_f32_array(N_CLASSES * d, "W_fc").reshape(N_CLASSES, d).astype(np.float64)
    b_fc = reader.read_f32_array(N_CLASSES, "b_fc").astype(np.float64)
    reader.expect_end()
    params = HeadParams(AttentionPoolParams(V, b, w), ClassifierParams(W_fc, b_fc))
    return params, (k, l)


def write_predictions(preds: list[tuple[str, float, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTIONS_HEADER)
        for slide_id, p_ce, p_laa in preds:
            writer.writerow([slide_id, f"{p_ce:.9f}", f"{p_laa:.9f}"])


def read_predictions(path: str) -> list[tuple[str, float, float]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != PREDICTIONS_HEADER:
            raise ValueError(f"unexpected predictions header {header} in {path}")
        return [(sid, float(p0), float(p1)) for sid, p0, p1 in reader]
