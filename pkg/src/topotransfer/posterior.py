"""Edge-factorized stochastic topology distributions.

With inner-product scores ``<Z, B>`` and an edge-wise feasibility mask, the
Gibbs distribution ``p(B) ~ exp(<Z, B>) 1{B feasible}`` factorizes into one
independent Bernoulli per feasible edge with parameter ``sigmoid(Z_ij)``.
Everything here works on that factorized form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .graph_core import FeasibilityMask, WeightedTopology


@dataclass(frozen=True, eq=False)
class EdgeScores:
    scores: np.ndarray
    mask: FeasibilityMask

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))


@dataclass(frozen=True, eq=False)
class EdgePosterior:
    edge_probs: np.ndarray
    mask: FeasibilityMask
    logits: np.ndarray | None = None


@dataclass(frozen=True)
class RelaxationConfig:
    temperature: float = 0.5
    mc_samples: int = 8
    # seeds the generator when a caller passes rng=None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be positive")


def distribution_from_scores(scores: EdgeScores) -> EdgePosterior:
    allowed = scores.mask.allowed
    Z = scores.scores
    if not np.all(np.isfinite(Z[allowed])):
        raise ValueError("non-finite score on a feasible entry")
    logits = np.where(allowed, Z, 0.0)
    probs = np.where(allowed, expit(logits), 0.0)
    return EdgePosterior(edge_probs=probs, mask=scores.mask, logits=logits)


def _log_probs(post: EdgePosterior) -> tuple[np.ndarray, np.ndarray]:
    """(log p, log (1-p)) per entry, computed from logits when available."""
    if post.logits is not None:
        return log_expit(post.logits), log_expit(-post.logits)
    p = np.clip(post.edge_probs, 1e-300, 1.0)
    return np.log(p), np.log1p(-np.clip(post.edge_probs, 0.0, 1.0 - 1e-16))


def kl_divergence(q: EdgePosterior, p: EdgePosterior) -> float:
    """Sum over feasible edges of the Bernoulli KL(q || p)."""
    if q.mask != p.mask:
        raise ValueError("posterior and prior masks differ")
    allowed = q.mask.allowed
    lq1, lq0 = _log_probs(q)
    lp1, lp0 = _log_probs(p)
    qv = q.edge_probs
    kl = qv * (lq1 - lp1) + (1.0 - qv) * (lq0 - lp0)
    return float(max(kl[allowed].sum(), 0.0))


def kl_gradient_logits(q_logits: np.ndarray, p_logits: np.ndarray,
                       mask: FeasibilityMask) -> np.ndarray:
    """d KL(Bern(sigmoid(a)) || Bern(sigmoid(b))) / d a  =  sigmoid'(a) (a - b)."""
    q = expit(q_logits)
    return np.where(mask.allowed, q * (1.0 - q) * (q_logits - p_logits), 0.0)


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Logistic noise as the difference of two Gumbels (via the inverse CDF)."""
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return np.log(u) - np.log1p(-u)


def relax(scores: np.ndarray, noise: np.ndarray, temperature: float,
          mask: FeasibilityMask) -> tuple[np.ndarray, np.ndarray]:
    """Soft and hard samples for given noise; leading noise axes broadcast."""
    soft = expit((scores + noise) / temperature)
    soft = np.where(mask.allowed, soft, 0.0)
    hard = (soft > 0.5).astype(np.int8)
    return soft, hard


def sample_relaxed(
    scores: EdgeScores, config: RelaxationConfig, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """One Gumbel-Sigmoid draw: (soft sample in [0,1], hard 0/1 sample).

    The hard sample is used in the forward pass; gradients flow through the
    soft value (straight-through). Without ``rng`` a fresh generator seeded
    from ``config.seed`` is used, so repeated calls return the same draw.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    noise = logistic_noise(rng, scores.scores.shape)
    return relax(scores.scores, noise, config.temperature, scores.mask)


def execution_topology(scores: EdgeScores) -> np.ndarray:
    """Most probable feasible graph: the positive-score edges (ties excluded)."""
    return ((scores.scores > 0) & scores.mask.allowed).astype(np.int8)


def posterior_mean(scores: EdgeScores) -> WeightedTopology:
    post = distribution_from_scores(scores)
    return WeightedTopology(post.edge_probs, scores.mask)
