"""Exact t-SNE over vectorised lung masks, plus embedding-space outlier filtering.

The optimiser follows the classic recipe: Gaussian input affinities calibrated
per point to a target perplexity, Student-t output affinities, early
exaggeration, momentum gradient descent with per-coordinate adaptive gains.
Everything is O(n^2) and deterministic for a given seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .imaging import BinaryMask, block_mean

log = logging.getLogger(__name__)

P_FLOOR = 1e-12
DEFAULT_OUTLIER_K = 30
_SIGMA_LO = 1e-20
_SIGMA_HI = 1e20


class PerplexityError(ValueError):
    """Raised when bisection cannot reach the target perplexity."""

    def __init__(self, message, sigma, entropy):
        super().__init__(message)
        self.sigma = sigma
        self.entropy = entropy


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 100.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch_iter: int = 250
    exaggeration_factor: float = 4.0
    exaggeration_iters: int = 100
    adaptive_gains: bool = True
    min_gain: float = 0.01
    perplexity_tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.perplexity <= 1:
            raise ValueError("perplexity must exceed 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.exaggeration_factor < 1:
            raise ValueError("exaggeration_factor must be >= 1")
        if self.exaggeration_iters > self.iterations:
            raise ValueError("exaggeration_iters cannot exceed iterations")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Embedding:
    case_ids: list[str]
    coords: np.ndarray
    kl_initial: float = float("nan")
    kl_final: float = float("nan")
    kl_history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def dims(self) -> int:
        return self.coords.shape[1]

    def __len__(self):
        return len(self.case_ids)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def mask_to_vector(mask: BinaryMask, side: int = 64) -> np.ndarray:
    """Fraction of set bits in each block of a side x side grid, flattened row-major."""
    return block_mean(mask.bits, side, side).ravel()


def vectorize_masks(masks: Mapping[str, BinaryMask], side: int = 64) -> tuple[list[str], np.ndarray]:
    ids = sorted(masks)
    return ids, np.stack([mask_to_vector(masks[i], side) for i in ids])


def squared_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


# ---------------------------------------------------------------------------
# input affinities
# ---------------------------------------------------------------------------


def row_entropy(sq_dists: np.ndarray, sigma: float) -> tuple[float, np.ndarray]:
    """Shannon entropy (bits) and conditional probabilities for one bandwidth."""
    d = np.asarray(sq_dists, dtype=np.float64)
    shifted = d - d.min()
    beta = 1.0 / (2.0 * sigma * sigma)
    with np.errstate(over="ignore"):
        w = np.exp(-shifted * beta)
    z = w.sum()
    p = w / z
    h_nats = math.log(z) + beta * float(np.dot(p, shifted))
    return h_nats / math.log(2.0), p


def calibrate_row(sq_dists, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Bisect the Gaussian bandwidth (in log space) until 2**H hits ``perplexity``.

    Returns ``(sigma, p)`` with ``p`` the conditional probabilities over the
    given neighbours.
    """
    d = np.asarray(sq_dists, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("sq_dists must be a non-empty 1D array")
    if np.any(d < 0):
        raise ValueError("squared distances must be non-negative")
    if not 1 < perplexity <= d.size:
        raise ValueError(f"perplexity {perplexity} unreachable with {d.size} neighbours")
    target = math.log2(perplexity)
    lo, hi = math.log(_SIGMA_LO), math.log(_SIGMA_HI)
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        sigma = math.exp(mid)
        h, p = row_entropy(d, sigma)
        if best is None or abs(h - target) < abs(best[1] - target):
            best = (sigma, h, p)
        if abs(h - target) <= tol:
            return sigma, p
        # entropy grows with bandwidth
        if h > target:
            hi = mid
        else:
            lo = mid
    sigma, h, _ = best
    raise PerplexityError(
        f"perplexity {perplexity} not reached: best sigma {sigma:.6g} gives entropy {h:.6g} bits",
        sigma,
        h,
    )


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5):
    """Row-stochastic p_{j|i} matrix and per-point bandwidths."""
    d = squared_distances(x)
    n = d.shape[0]
    cond = np.zeros((n, n))
    sigmas = np.empty(n)
    for i in range(n):
        others = np.r_[0:i, i + 1 : n]
        sigmas[i], cond[i, others] = calibrate_row(d[i, others], perplexity, tol)
    return cond, sigmas


def joint_affinities(x: np.ndarray, perplexity: float = 30.0, tol: float = 1e-5) -> np.ndarray:
    """Symmetrised joint probabilities p_ij = (p_{j|i} + p_{i|j}) / 2n."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 4:
        raise ValueError("need at least 4 points")
    if perplexity >= n - 1:
        raise ValueError(f"perplexity {perplexity} must be below n - 1 = {n - 1}")
    cond, _ = conditional_affinities(x, perplexity, tol)
    return (cond + cond.T) / (2.0 * n)


# ---------------------------------------------------------------------------
# output affinities, cost, gradient
# ---------------------------------------------------------------------------


def _student_kernel(y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num


def low_dim_affinities(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] < 2:
        raise ValueError("need at least 2 points")
    num = _student_kernel(y)
    return num / num.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("P and Q shapes differ")
    off = ~np.eye(p.shape[0], dtype=bool)
    pos = (p > 0) & off
    if np.any(q[pos] <= 0):
        raise ValueError("Q vanishes where P is positive")
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def tsne_gradient(p: np.ndarray, q: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dKL/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1."""
    y = np.asarray(y, dtype=np.float64)
    w = (np.asarray(p) - np.asarray(q)) * _student_kernel(y)
    return 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def run_tsne(
    vectors: np.ndarray,
    dims: int = 2,
    config: Optional[TsneConfig] = None,
    case_ids: Optional[Sequence[str]] = None,
    p: Optional[np.ndarray] = None,
) -> Embedding:
    """Embed ``vectors`` (n x D) into ``dims`` dimensions.

    A precomputed joint affinity matrix may be passed as ``p`` to skip
    calibration.
    """
    config = config or TsneConfig()
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if case_ids is None:
        case_ids = [str(i) for i in range(n)]
    if len(case_ids) != n:
        raise ValueError("one case id per vector required")
    if n <= config.perplexity + 1:
        raise ValueError(f"n={n} too small for perplexity {config.perplexity}")

    if p is None:
        p = joint_affinities(x, config.perplexity, config.perplexity_tol)
    p_exact = p
    p = np.maximum(p, P_FLOOR)
    np.fill_diagonal(p, 0.0)

    rng = np.random.default_rng(config.seed)
    y = rng.normal(0.0, 1e-4, size=(n, dims))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)

    kl_initial = kl_divergence(p_exact, low_dim_affinities(y))
    history = [(0, kl_initial)]
    for it in range(config.iterations):
        exaggerate = it < config.exaggeration_iters
        p_it = p * config.exaggeration_factor if exaggerate else p
        q = low_dim_affinities(y)
        grad = tsne_gradient(p_it, q, y)
        momentum = config.momentum_early if it < config.momentum_switch_iter else config.momentum_late
        if config.adaptive_gains:
            same_sign = np.sign(grad) == np.sign(velocity)
            gains = np.where(same_sign, gains * 0.8, gains + 0.2)
            np.maximum(gains, config.min_gain, out=gains)
        velocity = momentum * velocity - config.learning_rate * gains * grad
        y = y + velocity
        y -= y.mean(axis=0)
        if (it + 1) % 100 == 0:
            kl = kl_divergence(p_exact, low_dim_affinities(y))
            history.append((it + 1, kl))
            log.debug("t-SNE iteration %d: KL %.6f", it + 1, kl)

    kl_final = kl_divergence(p_exact, low_dim_affinities(y))
    if not history or history[-1][0] != config.iterations:
        history.append((config.iterations, kl_final))
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("t-SNE diverged to non-finite coordinates")
    return Embedding(list(case_ids), y, kl_initial, kl_final, history)


# ---------------------------------------------------------------------------
# outliers
# ---------------------------------------------------------------------------


def outlier_scores(embedding: Embedding, k: Optional[int] = None) -> dict[str, float]:
    """Mean Euclidean distance from each point to its k nearest other points.

    ``k`` defaults to min(DEFAULT_OUTLIER_K, n - 1). A small k lets a tight group
    of abnormal masks vouch for each other; a neighbourhood about as wide as
    the perplexity forces the score to look past such a group.
    """
    n = len(embedding)
    if k is None:
        k = min(DEFAULT_OUTLIER_K, n - 1)
    if not 0 < k < n:
        raise ValueError(f"k must be in [1, n), got k={k}, n={n}")
    order = sorted(range(n), key=lambda i: embedding.case_ids[i])
    ids = [embedding.case_ids[i] for i in order]
    y = embedding.coords[order]
    dist = np.sqrt(squared_distances(y))
    scores = {}
    for i in range(n):
        others = np.r_[0:i, i + 1 : n]
        # stable sort on id-ordered candidates breaks distance ties by case id
        nearest = others[np.argsort(dist[i, others], kind="stable")[:k]]
        scores[ids[i]] = float(dist[i, nearest].mean())
    return scores


def fraction_count(fraction: float, n: int) -> int:
    """floor(fraction * n), robust to binary representation error (0.05 * 100 -> 5)."""
    return int(math.floor(fraction * n + 1e-9))


def exclusion_list(scores: Mapping[str, float], fraction: float = 0.05) -> list[str]:
    """The floor(fraction * n) highest-scoring case ids, returned sorted."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    count = fraction_count(fraction, len(scores))
    ranked = sorted(scores, key=lambda cid: (-scores[cid], cid))
    return sorted(ranked[:count])
