"""Feature divergences and the multi-direction contrastive loss.

For an edited code ``z_i^k`` with divergence ``f_i^k`` the per-code loss is

    l(i, k) = -log( sum_{j != i} e^{s(f_i^k, f_j^k)/tau}
                    / sum_j sum_{l != k} e^{s(f_i^k, f_j^l)/tau} )

with ``s`` the guarded cosine similarity.  Same-direction pairs appear only in
the numerator and every cross-direction pair (including ``j == i``) only in
the denominator.  The total is the mean over all ``N * K`` codes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .directions import DirectionSet, edit_expr
from .generators import GeneratorSpec, feature_expr

DEFAULT_TAU = 0.5


class ObjectiveError(ValueError):
    pass


@dataclass
class DivergenceBatch:
    f: np.ndarray  # (N, K, F)
    z: np.ndarray  # (N, d)
    alpha: float
    generator: str = ""
    layer: str = ""


@dataclass
class LossValue:
    total: float
    per_code: np.ndarray  # (N, K)
    tau: float


@dataclass
class DivergenceGraph:
    f: dm.Expr  # (N, K, F)
    bn_inputs: list = field(default_factory=list)


def divergence_expr(gen: GeneratorSpec, dset: DirectionSet, z: dm.Expr, alpha: float,
                    training: bool = False) -> DivergenceGraph:
    """Graph of ``G_f(edit_k(z_i)) - G_f(z_i)`` stacked to (N, K, F).

    ``G_f(z_i)`` is built once and shared by all K branches.
    """
    base = feature_expr(gen, z)
    bn_inputs: list = []
    branches = [feature_expr(gen, edit_expr(m, z, alpha, training, bn_inputs)) - base for m in dset.models]
    return DivergenceGraph(dm.stack(branches, axis=1), bn_inputs)


def _check_batch(batch: np.ndarray, d: int) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ObjectiveError(f"need a batch of N >= 2 latent codes, got shape {batch.shape}")
    if batch.shape[1] != d:
        raise ObjectiveError(f"latent codes have length {batch.shape[1]}, expected {d}")
    return batch


def feature_divergences(gen: GeneratorSpec, dset: DirectionSet, batch, alpha: float,
                        training: bool = False) -> DivergenceBatch:
    batch = _check_batch(batch, gen.latent_dim)
    graph = divergence_expr(gen, dset, dm.input("z"), alpha, training)
    bindings = dict(dset.flat_params(), z=batch)
    f = dm.evaluate(graph.f, bindings)
    return DivergenceBatch(f, batch, alpha, gen.kind, gen.target_layer)


def _masks(N: int, K: int):
    """Positive/negative pair masks over rows ordered ``r = i * K + k``."""
    i = np.repeat(np.arange(N), K)
    k = np.tile(np.arange(K), N)
    same_k = k[:, None] == k[None, :]
    same_i = i[:, None] == i[None, :]
    return (same_k & ~same_i).astype(np.float64), (~same_k).astype(np.float64)


def contrastive_loss_expr(f: dm.Expr, N: int, K: int, tau: float) -> tuple[dm.Expr, dm.Expr]:
    """Scalar total loss and the flat per-code loss (rows ``i * K + k``) for a (N, K, F) node."""
    if tau <= 0:
        raise ObjectiveError(f"tau must be positive, got {tau}")
    if N < 2 or K < 2:
        raise ObjectiveError(f"need N >= 2 and K >= 2, got N={N}, K={K}")
    rows = dm.reshape(f, (N * K, -1))
    unit = dm.l2_normalize(rows, eps=dm.COSINE_EPS)
    sim = dm.matmul(unit, dm.transpose(unit))
    # shift by the largest attainable logit; the ratio is unchanged
    logits = dm.exp(dm.scale(sim, 1.0 / tau) - 1.0 / tau)
    pos, neg = _masks(N, K)
    num = dm.sum(logits * dm.const(pos), axis=1)
    den = dm.sum(logits * dm.const(neg), axis=1)
    per_code = dm.log(den) - dm.log(num)
    return dm.mean(per_code), per_code


def _check_div(f: np.ndarray, tau: float) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise ObjectiveError(f"divergences must be N x K x F, got shape {f.shape}")
    if tau <= 0:
        raise ObjectiveError(f"tau must be positive, got {tau}")
    if not np.all(np.isfinite(f)):
        raise ObjectiveError("non-finite feature divergence")
    return f


def contrastive_loss(div: DivergenceBatch | np.ndarray, tau: float = DEFAULT_TAU) -> LossValue:
    f = _check_div(div.f if isinstance(div, DivergenceBatch) else div, tau)
    N, K, _ = f.shape
    total, per_code = contrastive_loss_expr(dm.input("f"), N, K, tau)
    tr = dm.trace(total, {"f": f})
    return LossValue(float(tr.output), tr[per_code].reshape(N, K).copy(), tau)


def loss_oracle(div: DivergenceBatch | np.ndarray, tau: float = DEFAULT_TAU) -> float:
    """Reference value of the same loss by explicit loops over (i, k, j, l)."""
    f = _check_div(div.f if isinstance(div, DivergenceBatch) else div, tau)
    N, K, F = f.shape
    if N < 2 or K < 2:
        raise ObjectiveError(f"need N >= 2 and K >= 2, got N={N}, K={K}")

    def norm(a):
        s = 0.0
        for t in range(F):
            s += a[t] * a[t]
        return math.sqrt(s)

    def sim(a, b):
        s = 0.0
        for t in range(F):
            s += a[t] * b[t]
        return s / ((norm(a) + 1e-12) * (norm(b) + 1e-12))

    total = 0.0
    for i in range(N):
        for k in range(K):
            num = 0.0
            for j in range(N):
                if j != i:
                    num += math.exp(sim(f[i, k], f[j, k]) / tau)
            den = 0.0
            for j in range(N):
                for l in range(K):
                    if l != k:
                        den += math.exp(sim(f[i, k], f[j, l]) / tau)
            total += -math.log(num / den)
    return total / (N * K)


def nt_xent(a: np.ndarray, b: np.ndarray, tau: float = DEFAULT_TAU) -> float:
    """Pairwise NT-Xent over 2N views where ``a[i]`` and ``b[i]`` are positives.

    Each anchor is contrasted with every other view (``k != i``); the result is
    the mean over all 2N anchors.  Kept as a reference for the generalized loss.
    """
    z = np.concatenate([np.asarray(a, float), np.asarray(b, float)])
    n2 = z.shape[0]
    half = n2 // 2
    u = z / (np.linalg.norm(z, axis=1, keepdims=True) + dm.COSINE_EPS)
    s = u @ u.T / tau
    total = 0.0
    for i in range(n2):
        pos = (i + half) % n2
        others = [s[i, k] for k in range(n2) if k != i]
        total += -s[i, pos] + math.log(np.sum(np.exp(others)))
    return total / n2
