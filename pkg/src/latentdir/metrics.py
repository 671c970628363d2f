"""Quantitative evaluation of a trained direction set.

Learned directions are compared through fingerprints: the mean unit edit
direction of each model over probe latents (exactly ``theta / ||theta||`` for
global models).  Ground-truth comparisons are sign-invariant.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .directions import GLOBAL, DirectionSet, edit
from .generators import GeneratorSpec, features, ground_truth_directions
from .hungarian import linear_sum_assignment
from .objective import feature_divergences

MIN_PROBES = 32


class EvalError(ValueError):
    pass


@dataclass
class AlignmentReport:
    assignment: dict[int, int]  # learned index -> ground-truth index
    pair_cos: dict[int, float]  # learned index -> |cos| with its assigned truth
    mean_cos: float
    unmatched: list[int] = field(default_factory=list)
    unmatched_truth: list[int] = field(default_factory=list)
    fingerprint_variance: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["assignment"] = {str(k): v for k, v in self.assignment.items()}
        d["pair_cos"] = {str(k): v for k, v in self.pair_cos.items()}
        return d


@dataclass
class RescoreReport:
    direction: int
    factor: int
    alphas: list[float]
    scores: np.ndarray  # (probes, len(alphas))
    baseline: np.ndarray  # scores at alpha = 0
    monotone_fraction: float
    sign: int  # +1 if scores mostly increase with alpha, -1 otherwise

    def to_dict(self) -> dict:
        return {
            "direction": self.direction, "factor": self.factor, "alphas": self.alphas,
            "mean_scores": self.scores.mean(axis=0).tolist(),
            "std_scores": self.scores.std(axis=0).tolist(),
            "baseline_mean": float(self.baseline.mean()),
            "monotone_fraction": self.monotone_fraction, "sign": self.sign,
        }


def fingerprints(dset: DirectionSet, probes=None, alpha: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(K, d) unit fingerprints and per-model mean squared spread of per-probe directions."""
    out = np.zeros((dset.K, dset.d))
    spread = np.zeros(dset.K)
    for m in dset.models:
        if m.kind == GLOBAL:
            theta = m.params["theta"]
            out[m.index] = theta / np.linalg.norm(theta)
            continue
        if probes is None:
            raise EvalError("conditional direction models need probe latents for a fingerprint")
        probes = np.asarray(probes, dtype=np.float64)
        units = (edit(m, probes, alpha) - probes) / alpha
        mean = units.mean(axis=0)
        out[m.index] = mean / np.linalg.norm(mean)
        spread[m.index] = float(np.mean(np.sum((units - mean) ** 2, axis=1)))
    return out, spread


def align_vectors(learned: np.ndarray, truth: np.ndarray) -> AlignmentReport:
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    L = learned / np.linalg.norm(learned, axis=1, keepdims=True)
    T = truth / np.linalg.norm(truth, axis=1, keepdims=True)
    cos = np.clip(np.abs(L @ T.T), 0.0, 1.0)
    rows, cols = linear_sum_assignment(1.0 - cos)
    assignment = {int(r): int(c) for r, c in zip(rows, cols)}
    pair = {r: float(cos[r, c]) for r, c in assignment.items()}
    return AlignmentReport(
        assignment, pair, float(np.mean(list(pair.values()))),
        sorted(set(range(len(L))) - set(assignment)),
        sorted(set(range(len(T))) - set(assignment.values())),
    )


def alignment_score(dset: DirectionSet, truth, probes, alpha: float = 1.0) -> AlignmentReport:
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim != 2 or probes.shape[0] < MIN_PROBES:
        raise EvalError(f"need at least {MIN_PROBES} probe latents, got {probes.shape[0] if probes.ndim else 0}")
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if truth.size == 0:
        raise EvalError("ground truth is empty")
    if truth.shape[1] != dset.d:
        raise EvalError(f"ground truth has dimension {truth.shape[1]}, directions have {dset.d}")
    fp, spread = fingerprints(dset, probes, alpha)
    report = align_vectors(fp, truth)
    report.fingerprint_variance = spread.tolist()
    return report


def diversity_score(dset: DirectionSet, probes=None, alpha: float = 1.0) -> float:
    """Mean pairwise |cos| between fingerprints: 0 fully diverse, 1 collapsed."""
    fp, _ = fingerprints(dset, probes, alpha)
    return pairwise_abs_cos(fp)


def pairwise_abs_cos(vectors: np.ndarray) -> float:
    V = np.asarray(vectors, dtype=np.float64)
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    iu = np.triu_indices(len(V), 1)
    return float(np.mean(np.clip(np.abs(V @ V.T)[iu], 0.0, 1.0)))


def margin_from_divergences(f: np.ndarray) -> float:
    """Mean over codes of (mean same-direction cos) - (mean cross-direction cos)."""
    f = np.asarray(f, dtype=np.float64)
    N, K, _ = f.shape
    norms = np.linalg.norm(f, axis=-1)
    if np.any(norms < 1e-12):
        raise EvalError("degenerate (zero) feature divergence; margin undefined")
    u = (f / norms[..., None]).reshape(N * K, -1)
    S = (u @ u.T).reshape(N, K, N, K)
    total = 0.0
    for i in range(N):
        for k in range(K):
            same = np.delete(S[i, k, :, k], i).mean()
            cross = np.delete(S[i, k], k, axis=1).mean()
            total += same - cross
    return total / (N * K)


def identifiability_margin(gen: GeneratorSpec, dset: DirectionSet, batch, alpha: float = 1.0,
                           tau: float | None = None) -> float:
    # tau does not enter the margin; accepted so callers can pass the training config through
    div = feature_divergences(gen, dset, batch, alpha)
    return margin_from_divergences(div.f)


def _strict_monotone(row: np.ndarray) -> int:
    d = np.diff(row)
    if np.all(d > 0):
        return 1
    if np.all(d < 0):
        return -1
    return 0


def rescoring(gen: GeneratorSpec, dset: DirectionSet, k: int, alpha_grid, probes,
              factor: int | None = None) -> RescoreReport:
    """Read out the assigned ground-truth factor along a sweep of edit strengths.

    ``factor`` defaults to the factor that optimal assignment gives direction ``k``.
    """
    alphas = sorted(float(a) for a in alpha_grid)
    if not np.allclose(alphas, [-a for a in reversed(alphas)]) or 0.0 not in alphas:
        raise EvalError(f"alpha grid must be symmetric around 0 and contain 0, got {alphas}")
    probes = np.asarray(probes, dtype=np.float64)
    if factor is None:
        report = alignment_score(dset, ground_truth_directions(gen), probes)
        if k not in report.assignment:
            raise EvalError(f"direction {k} is not assigned to any ground-truth factor")
        factor = report.assignment[k]
    model = dset.models[k]
    scores = np.zeros((len(probes), len(alphas)))
    for c, a in enumerate(alphas):
        z = probes if a == 0.0 else edit(model, probes, a)
        scores[:, c] = features(gen, z)[:, factor]
    signs = np.array([_strict_monotone(row) for row in scores])
    inc, dec = int(np.sum(signs == 1)), int(np.sum(signs == -1))
    sign = 1 if inc >= dec else -1
    baseline = scores[:, alphas.index(0.0)].copy()
    return RescoreReport(k, factor, alphas, scores, baseline, max(inc, dec) / len(probes), sign)


def transfer_eval(dset: DirectionSet, gen_b: GeneratorSpec, truth_b=None, probes=None,
                  alpha: float = 1.0) -> AlignmentReport:
    if gen_b.latent_dim != dset.d:
        raise EvalError(f"latent dimension mismatch: directions d={dset.d}, generator d={gen_b.latent_dim}")
    truth = ground_truth_directions(gen_b) if truth_b is None else truth_b
    return alignment_score(dset, truth, probes, alpha)


def random_alignment_null(K: int, F: int, d: int, trials: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean and std of the assigned mean |cos| for random unit directions."""
    rng = np.random.default_rng(seed)
    vals = np.empty(trials)
    for t in range(trials):
        L = rng.standard_normal((K, d))
        T = np.linalg.qr(rng.standard_normal((d, F)))[0].T
        vals[t] = align_vectors(L, T).mean_cos
    return float(vals.mean()), float(vals.std(ddof=1))
