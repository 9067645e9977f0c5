"""Contrastive in-domain pretraining of the toy encoder (MoCo-v3 style).

Two augmented views per tile, a query encoder trained by gradient descent and
a key encoder updated only by exponential moving average. Positives are the
two views of the same tile; negatives are the other tiles in the batch (no
queue). The InfoNCE loss is symmetrized over the similarity matrix:

    loss = 0.5 * [ L(Q, K) + L(K, Q) ],   L(A, B) = mean_i CE(softmax_j(a_i.b_j / tau), i)

Gradients flow through the query path only, in float64; the key path is
gradient-free by construction. Everything is deterministic for a fixed seed.

MILP container (little-endian): magic "MILP", u16 version = 1, u32
patch_size, u32 D, then projection ((3*patch^2) x D) and bias (D) as float32
row-major.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .augment import AugmentSpec, make_two_views
from .embedder import ToyEncoderParams, init_toy_encoder, patch_tokens
from .rng import SeededRng

MILP_MAGIC = b"MILP"
MILP_VERSION = 1


@dataclass
class SSLConfig:
    temperature: float = 0.2
    ema_momentum: float = 0.99
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    proj_dim: int = 32
    learning_rate: float = 0.5

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must be in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.proj_dim < 1:
            raise ValueError("proj_dim must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class ProjectionHead:
    weight: np.ndarray = field(repr=False)  # (proj_dim, D)
    bias: np.ndarray = field(repr=False)  # (proj_dim,)

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weight.copy(), self.bias.copy())


@dataclass
class SSLEncoder:
    base: ToyEncoderParams
    head: ProjectionHead

    def arrays(self) -> list[np.ndarray]:
        return [self.base.projection, self.base.bias, self.head.weight, self.head.bias]

    def copy(self) -> "SSLEncoder":
        return SSLEncoder(self.base.copy(), self.head.copy())


@dataclass
class EncoderPair:
    query: SSLEncoder
    key: SSLEncoder


@dataclass
class EncoderGrads:
    projection: np.ndarray
    bias: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.projection, self.bias, self.head_weight, self.head_bias]


def init_encoder_pair(patch_size: int, dim: int, proj_dim: int, seed: int) -> EncoderPair:
    rng = SeededRng(seed)
    base = init_toy_encoder(patch_size, dim, rng.next_u64())
    limit = 1.0 / np.sqrt(dim)
    head = ProjectionHead(
        rng.uniform_array(proj_dim * dim, -limit, limit).reshape(proj_dim, dim),
        np.zeros(proj_dim),
    )
    query = SSLEncoder(base, head)
    return EncoderPair(query=query, key=query.copy())


def _embed_cached(view: np.ndarray, encoder: SSLEncoder):
    """Forward pass keeping the intermediates the backward pass needs."""
    mean_patch = patch_tokens(view, encoder.base.patch_size).mean(axis=0)
    token_mean = mean_patch @ encoder.base.projection + encoder.base.bias
    raw = encoder.head.weight @ token_mean + encoder.head.bias
    norm = float(np.linalg.norm(raw))
    if norm == 0.0:
        warnings.warn("degenerate view embedded to the zero vector", RuntimeWarning)
        return np.zeros_like(raw), raw, token_mean, mean_patch, 0.0
    return raw / norm, raw, token_mean, mean_patch, norm


def embed_view(view: np.ndarray, encoder: SSLEncoder) -> np.ndarray:
    """Tokens averaged, projected, and L2-normalized to a unit vector.

    A degenerate all-zero projection maps to the zero vector (with a warning)
    rather than dividing by zero.
    """
    return _embed_cached(view, encoder)[0]


def _validate_unit_rows(mat: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(mat, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        worst = float(np.abs(norms - 1.0).max())
        raise binio.PayloadError(f"{name} rows must be unit-norm (tol 1e-6), off by {worst:.2e}")


def info_nce_loss(queries: np.ndarray, keys: np.ndarray, temperature: float) -> float:
    """Symmetrized InfoNCE over in-batch similarity logits, positives on the diagonal."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if queries.shape != keys.shape or queries.ndim != 2 or queries.shape[0] < 2:
        raise ValueError(f"need matching (B>=2, P) arrays, got {queries.shape} / {keys.shape}")
    _validate_unit_rows(queries, "queries")
    _validate_unit_rows(keys, "keys")
    logits = queries @ keys.T / temperature
    return 0.5 * (_diag_cross_entropy(logits) + _diag_cross_entropy(logits.T))


def _diag_cross_entropy(logits: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_softmax = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-np.mean(np.diag(log_softmax)))


def _rows_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def info_nce_query_grad(queries: np.ndarray, keys: np.ndarray,
                        temperature: float) -> np.ndarray:
    """d loss / d queries for the symmetrized InfoNCE (keys held fixed)."""
    b = queries.shape[0]
    logits = queries @ keys.T / temperature
    eye = np.eye(b)
    d1 = (_rows_softmax(logits) - eye) / b  # L(Q, K) term
    d2 = (_rows_softmax(logits.T) - eye) / b  # L(K, Q) term: logits transposed
    return 0.5 * (d1 + d2.T) @ keys / temperature


def momentum_update(pair: EncoderPair, m: float) -> None:
    """EMA blend in place: key <- m * key + (1 - m) * query, elementwise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    for key_arr, query_arr in zip(pair.key.arrays(), pair.query.arrays()):
        key_arr *= m
        key_arr += (1.0 - m) * query_arr


def contrastive_step_grads(views_a: list[np.ndarray], views_b: list[np.ndarray],
                           pair: EncoderPair, temperature: float):
    """Loss and exact query-encoder gradients for one batch of view pairs.

    views_a go through the query encoder, views_b through the key encoder.
    Returns (loss, EncoderGrads) with gradients accumulated in batch order.
    """
    caches = [_embed_cached(v, pair.query) for v in views_a]
    queries = np.stack([c[0] for c in caches])
    keys = np.stack([embed_view(v, pair.key) for v in views_b])

    loss = info_nce_loss(queries, keys, temperature)
    d_queries = info_nce_query_grad(queries, keys, temperature)

    grads = EncoderGrads(*(np.zeros_like(a) for a in pair.query.arrays()))
    for (unit, raw, token_mean, mean_patch, norm), d_unit in zip(caches, d_queries):
        if norm == 0.0:
            continue
        d_raw = (d_unit - unit * (unit @ d_unit)) / norm  # through L2 normalize
        grads.head_weight += np.outer(d_raw, token_mean)
        grads.head_bias += d_raw
        d_token = pair.query.head.weight.T @ d_raw
        grads.projection += np.outer(mean_patch, d_token)
        grads.bias += d_token
    return loss, grads


@dataclass
class PretrainResult:
    encoder: ToyEncoderParams  # trained query base encoder
    losses: list[float]  # per-epoch mean loss
    pair: EncoderPair  # final query/key pair


def pretrain(tiles: list[np.ndarray], aug_spec: AugmentSpec, cfg: SSLConfig,
             patch_size: int, embed_dim: int,
             pair: EncoderPair | None = None) -> PretrainResult:
    """Contrastive pretraining over a tile corpus.

    Per step: draw a batch (epoch-shuffled order), make two views per tile,
    embed with query/key encoders, symmetric InfoNCE, SGD on the query path,
    EMA update of the key. The view side (crop_size or the tile side,
    whichever is smaller) must be divisible by patch_size.
    """
    cfg.validate()
    aug_spec.validate()
    if len(tiles) < cfg.batch_size:
        raise ValueError(f"corpus has {len(tiles)} tiles, need >= batch_size {cfg.batch_size}")

    rng = SeededRng(cfg.seed)
    if pair is None:
        pair = init_encoder_pair(patch_size, embed_dim, cfg.proj_dim, rng.next_u64())

    losses = []
    n = len(tiles)
    for _ in range(cfg.epochs):
        order = list(range(n))
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            views_a, views_b = [], []
            for idx in batch:
                a, b = make_two_views(tiles[idx], aug_spec, rng)
                views_a.append(a)
                views_b.append(b)
            loss, grads = contrastive_step_grads(views_a, views_b, pair, cfg.temperature)
            for theta, g in zip(pair.query.arrays(), grads.arrays()):
                theta -= cfg.learning_rate * g
            momentum_update(pair, cfg.ema_momentum)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return PretrainResult(pair.query.base.copy(), losses, pair)


def save_toy_encoder(params: ToyEncoderParams, path: str) -> None:
    blob = binio.pack_header(MILP_MAGIC, MILP_VERSION, (params.patch_size, params.dim))
    blob += binio.f32_bytes(params.projection.reshape(-1))
    blob += binio.f32_bytes(params.bias)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_toy_encoder(path: str) -> ToyEncoderParams:
    with open(path, "rb") as fh:
        reader = binio.Reader(fh.read(), source=path)
    reader.expect_magic(MILP_MAGIC, MILP_VERSION)
    patch_size, dim = reader.read_u32s(2)
    fan_in = 3 * patch_size * patch_size
    projection = reader.read_f32_array(fan_in * dim, "projection").reshape(fan_in, dim)
    bias = reader.read_f32_array(dim, "bias")
    reader.expect_end()
    return ToyEncoderParams(patch_size, projection.astype(np.float64), bias.astype(np.float64))


def write_loss_curve(losses: list[float], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses):
            writer.writerow([epoch, f"{loss:.9f}"])
