"""Residual posterior adaptation around an aligned prior.

The posterior scores are ``prior_logits(C) + R``; ``R`` is fit by gradient
descent on ``risk + lambda_kl * KL(q || p) + lambda_r * |R|_1`` with a
straight-through Gumbel-Sigmoid estimate for the risk term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np
from scipy.special import logit

from .graph_core import FeasibilityMask, WeightedTopology
from .posterior import (
    EdgePosterior,
    EdgeScores,
    RelaxationConfig,
    distribution_from_scores,
    kl_divergence,
    kl_gradient_logits,
    logistic_noise,
    relax,
)

L1_SMOOTHING = 1e-8
SCORE_SPACES = ("logit", "raw")


class UtilityOracle(Protocol):
    """Scores one topology on one support example with a loss in [0, 1].

    Implementations may also provide ``loss_table(graphs, examples)`` and
    ``gradient_table(graphs, examples)`` for vectorized evaluation; the
    adaptation code falls back to per-pair ``evaluate`` calls otherwise.
    """

    def evaluate(self, topology: np.ndarray, example: Any) -> float: ...


@dataclass(frozen=True)
class TrainConfig:
    lambda_kl: float = 0.01
    lambda_r: float = 0.01
    learning_rate: float = 0.05
    steps: int = 300
    relaxation: RelaxationConfig = field(default_factory=RelaxationConfig)
    score_space: str = "logit"
    prior_clip: float = 1e-4

    def __post_init__(self) -> None:
        if self.lambda_kl < 0 or self.lambda_r < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.score_space not in SCORE_SPACES:
            raise ValueError(f"score_space must be one of {SCORE_SPACES}")
        if not 0.0 < self.prior_clip < 0.5:
            raise ValueError("prior_clip must lie in (0, 0.5)")


@dataclass(frozen=True)
class TransferParams:
    c_a: float = 0.1
    c_sigma: float = 0.1
    tau_u: float = 0.5
    tau_kappa: float = 1.0
    delta: float = 0.05

    def __post_init__(self) -> None:
        if self.c_a < 0 or self.c_sigma < 0 or self.tau_kappa < 0:
            raise ValueError("c_a, c_sigma and tau_kappa must be >= 0")
        if not 0.0 <= self.tau_u <= 1.0:
            raise ValueError("tau_u must lie in [0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


class OracleContractError(ValueError):
    pass


def prior_logits(center: WeightedTopology, config: TrainConfig) -> np.ndarray:
    """Map a prior center with entries in [0, 1] into score space."""
    C = np.asarray(center.weights, dtype=float)
    if config.score_space == "raw":
        Z = C
    else:
        Z = logit(np.clip(C, config.prior_clip, 1.0 - config.prior_clip))
    return np.where(center.mask.allowed, Z, 0.0)


def loss_table(oracle: UtilityOracle, graphs: np.ndarray, examples: Sequence[Any]) -> np.ndarray:
    """Losses of every graph on every example, shape (len(graphs), len(examples))."""
    if hasattr(oracle, "loss_table"):
        L = np.asarray(oracle.loss_table(graphs, examples), dtype=float)
    else:
        L = np.array([[oracle.evaluate(B, z) for z in examples] for B in graphs], dtype=float)
    if np.any(~np.isfinite(L)) or L.min() < 0.0 or L.max() > 1.0:
        raise OracleContractError("oracle returned a loss outside [0, 1]")
    return L


def edge_gradients(oracle: UtilityOracle, graphs: np.ndarray, examples: Sequence[Any],
                   mask: FeasibilityMask) -> np.ndarray:
    """Example-averaged d loss / d B_ij at each graph, shape (S, n, n).

    Without an analytic gradient the derivative of the loss' multilinear
    extension is used: loss with the edge on minus loss with it off.
    """
    if hasattr(oracle, "gradient_table"):
        G = np.asarray(oracle.gradient_table(graphs, examples), dtype=float)
        return np.where(mask.allowed, G, 0.0)
    G = np.zeros(graphs.shape, dtype=float)
    for s, B in enumerate(graphs):
        for i, j in np.argwhere(mask.allowed):
            on, off = B.copy(), B.copy()
            on[i, j], off[i, j] = 1, 0
            G[s, i, j] = np.mean([oracle.evaluate(on, z) - oracle.evaluate(off, z) for z in examples])
    return G


def empirical_risk(scores: EdgeScores, support: Sequence[Any], oracle: UtilityOracle,
                   relaxation: RelaxationConfig, rng: np.random.Generator | None = None) -> float:
    """Monte Carlo estimate of the expected support loss under ``q(scores)``.

    ``rng=None`` draws from a generator seeded with ``relaxation.seed``.
    """
    if len(support) == 0:
        raise ValueError("support set is empty")
    rng = rng if rng is not None else np.random.default_rng(relaxation.seed)
    noise = logistic_noise(rng, (relaxation.mc_samples, *scores.scores.shape))
    _, hard = relax(scores.scores, noise, relaxation.temperature, scores.mask)
    return float(loss_table(oracle, hard, support).mean())


def smooth_l1_gradient(R: np.ndarray) -> np.ndarray:
    return R / np.sqrt(R**2 + L1_SMOOTHING)


def smooth_l1(R: np.ndarray) -> float:
    return float(np.sum(np.sqrt(R**2 + L1_SMOOTHING)))


def regularizer(residual: np.ndarray, prior: np.ndarray, mask: FeasibilityMask,
                config: TrainConfig, smooth: bool = False) -> float:
    """``lambda_kl * KL(q||p) + lambda_r * |R|_1`` over feasible entries."""
    q = distribution_from_scores(EdgeScores(prior + residual, mask))
    p = distribution_from_scores(EdgeScores(prior, mask))
    R = np.where(mask.allowed, residual, 0.0)
    l1 = smooth_l1(R[mask.allowed]) if smooth else float(np.abs(R).sum())
    return config.lambda_kl * kl_divergence(q, p) + config.lambda_r * l1


def regularizer_gradient(residual: np.ndarray, prior: np.ndarray, mask: FeasibilityMask,
                         config: TrainConfig) -> np.ndarray:
    """Exact gradient of the KL plus smoothed-L1 part."""
    g = config.lambda_kl * kl_gradient_logits(prior + residual, prior, mask)
    g = g + config.lambda_r * smooth_l1_gradient(residual)
    return np.where(mask.allowed, g, 0.0)


def straight_through_gradient(scores: np.ndarray, noise: np.ndarray, temperature: float,
                              mask: FeasibilityMask, oracle: UtilityOracle,
                              support: Sequence[Any]) -> tuple[float, np.ndarray]:
    """Risk estimate on hard samples and its straight-through gradient.

    Forward uses the hard graphs; the backward pass multiplies the oracle's
    edge gradient at each hard graph by the soft sample's derivative.
    """
    soft, hard = relax(scores, noise, temperature, mask)
    risk = float(loss_table(oracle, hard, support).mean())
    G = edge_gradients(oracle, hard, support, mask)
    dsoft = soft * (1.0 - soft) / temperature
    grad = np.mean(G * dsoft, axis=0)
    return risk, np.where(mask.allowed, grad, 0.0)


def training_loss(residual: np.ndarray, prior_center: WeightedTopology,
                  support: Sequence[Any], oracle: UtilityOracle, config: TrainConfig,
                  rng: np.random.Generator) -> float:
    mask = prior_center.mask
    if np.any(np.asarray(residual)[~mask.allowed] != 0):
        raise ValueError("residual must be zero on masked entries")
    prior = prior_logits(prior_center, config)
    risk = empirical_risk(EdgeScores(prior + residual, mask), support, oracle,
                          config.relaxation, rng)
    return risk + regularizer(residual, prior, mask, config)


def train_residual(prior_center: WeightedTopology, support: Sequence[Any],
                   oracle: UtilityOracle, config: TrainConfig, rng: np.random.Generator,
                   init: np.ndarray | None = None) -> tuple[np.ndarray, list[float]]:
    """Gradient descent on the residual score matrix.

    Starts from zero (or ``init``) and draws fresh relaxation noise each step.
    Returns the final residual and the per-step training loss.
    """
    mask = prior_center.mask
    prior = prior_logits(prior_center, config)
    R = np.zeros_like(prior) if init is None else np.where(mask.allowed, init, 0.0)
    relax_cfg = config.relaxation
    trace: list[float] = []
    for step in range(config.steps):
        noise = logistic_noise(rng, (relax_cfg.mc_samples, *prior.shape))
        risk, g_risk = straight_through_gradient(
            prior + R, noise, relax_cfg.temperature, mask, oracle, support
        )
        loss = risk + regularizer(R, prior, mask, config)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at step {step}")
        trace.append(loss)
        R = R - config.learning_rate * (g_risk + regularizer_gradient(R, prior, mask, config))
        R = np.where(mask.allowed, R, 0.0)
        if not np.all(np.isfinite(R)):
            raise FloatingPointError(f"non-finite residual after step {step}")
    return R, trace


def transfer_complexity(q: EdgePosterior, p: EdgePosterior, alignment_cost: float,
                        dispersion: float, params: TransferParams) -> float:
    return kl_divergence(q, p) + params.c_a * alignment_cost + params.c_sigma * dispersion


def complexity_term(kl: float, s_t: int, bank_size: int, delta: float) -> float:
    """``sqrt((KL + log(2 M sqrt(s) / delta)) / (2 s))``."""
    return math.sqrt((kl + math.log(2.0 * bank_size * math.sqrt(s_t) / delta)) / (2.0 * s_t))


def pac_bayes_bound(empirical_risk: float, q: EdgePosterior, p: EdgePosterior, s_t: int,
                    bank_size: int, alignment_cost: float, dispersion: float,
                    params: TransferParams) -> float:
    """Right-hand side of the geometry-aware PAC-Bayes transfer bound."""
    if s_t < 1 or bank_size < 1:
        raise ValueError("s_t and bank_size must be >= 1")
    if not 0.0 < params.delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    kl = kl_divergence(q, p)
    return (
        empirical_risk
        + complexity_term(kl, s_t, bank_size, params.delta)
        + params.c_a * alignment_cost
        + params.c_sigma * dispersion
    )
