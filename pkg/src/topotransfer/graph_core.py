"""Attributed directed topologies, feasibility masks and structural metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

MEASURE_ATOL = 1e-9


class TopologyError(ValueError):
    """Raised when a graph violates one of its structural invariants."""


@dataclass(frozen=True)
class FeasibilityMask:
    """Edge-wise feasibility: ``allowed[i, j]`` is true iff ``i -> j`` may exist."""

    allowed: np.ndarray

    def __post_init__(self) -> None:
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise TopologyError(f"mask must be square, got shape {allowed.shape}")
        allowed = allowed.copy()
        allowed.setflags(write=False)
        object.__setattr__(self, "allowed", allowed)

    @classmethod
    def full(cls, n: int) -> FeasibilityMask:
        """All off-diagonal edges allowed."""
        return cls(~np.eye(n, dtype=bool))

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    @property
    def num_feasible(self) -> int:
        return int(self.allowed.sum())

    def check(self) -> None:
        if np.any(np.diag(self.allowed)):
            raise TopologyError("self-loop permitted by mask")
        if self.n >= 2 and not self.allowed.any():
            raise TopologyError("mask has no feasible entries")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeasibilityMask):
            return NotImplemented
        return np.array_equal(self.allowed, other.allowed)

    def __hash__(self) -> int:
        return hash(self.allowed.tobytes())


def _frozen(a: Any, dtype: Any = float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AttributedTopology:
    """A task-side graph ``(B, X, mu)`` together with its feasibility mask.

    Construction does not validate; call :func:`validate` for that so that
    malformed graphs read from disk can be reported rather than rejected
    halfway through parsing.
    """

    adjacency: np.ndarray
    attributes: np.ndarray
    node_measure: np.ndarray
    mask: FeasibilityMask

    def __post_init__(self) -> None:
        object.__setattr__(self, "adjacency", _frozen(self.adjacency, np.int8))
        attrs = np.array(self.attributes, dtype=float)
        if attrs.ndim == 1:
            attrs = attrs[:, None]
        attrs.setflags(write=False)
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "node_measure", _frozen(self.node_measure))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def d(self) -> int:
        return self.attributes.shape[1]

    def to_record(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "d": self.d,
            "adjacency": self.adjacency.astype(int).ravel().tolist(),
            "attributes": self.attributes.ravel().tolist(),
            "measure": self.node_measure.tolist(),
            "mask": self.mask.allowed.astype(int).ravel().tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> AttributedTopology:
        n, d = int(rec["n"]), int(rec["d"])
        return cls(
            adjacency=np.reshape(rec["adjacency"], (n, n)),
            attributes=np.reshape(np.asarray(rec["attributes"], dtype=float), (n, d)),
            node_measure=np.asarray(rec["measure"], dtype=float),
            mask=FeasibilityMask(np.reshape(rec["mask"], (n, n)).astype(bool)),
        )


@dataclass(frozen=True, eq=False)
class WeightedTopology:
    """Soft adjacency with entries in [0, 1]; zero wherever the mask forbids."""

    weights: np.ndarray
    mask: FeasibilityMask

    def __post_init__(self) -> None:
        w = np.where(self.mask.allowed, np.asarray(self.weights, dtype=float), 0.0)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def check(self) -> None:
        if np.any(self.weights < 0.0) or np.any(self.weights > 1.0):
            raise TopologyError("weights outside [0, 1]")


def validate(topology: AttributedTopology) -> None:
    """Raise :class:`TopologyError` naming the first violated invariant."""
    B = topology.adjacency
    n = B.shape[0]
    if B.ndim != 2 or B.shape != (n, n):
        raise TopologyError(f"adjacency must be square, got {B.shape}")
    if topology.mask.n != n:
        raise TopologyError(f"mask size {topology.mask.n} does not match n={n}")
    if not np.isin(B, (0, 1)).all():
        raise TopologyError("adjacency entries must be 0/1")
    if np.any(np.diag(B) != 0):
        raise TopologyError("self-loop in adjacency")
    topology.mask.check()
    if np.any((B == 1) & ~topology.mask.allowed):
        raise TopologyError("mask violation: edge on a forbidden entry")
    if topology.attributes.shape[0] != n:
        raise TopologyError(
            f"attributes have {topology.attributes.shape[0]} rows, expected {n}"
        )
    mu = topology.node_measure
    if mu.shape != (n,):
        raise TopologyError(f"measure has shape {mu.shape}, expected ({n},)")
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > MEASURE_ATOL:
        raise TopologyError(f"measure not normalized (sum={mu.sum():.12g})")


def structural_distance(a: np.ndarray, b: np.ndarray, mask: FeasibilityMask) -> float:
    """Normalized Hamming distance over the feasible entries of two graphs.

    Real-valued inputs in [0, 1] are accepted and give the mean absolute
    difference, which is the multilinear extension of the binary distance.
    """
    nf = mask.num_feasible
    if nf == 0:
        raise TopologyError("mask has zero feasible entries")
    diff = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return float(diff[mask.allowed].sum() / nf)


def uniform_measure(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    return np.full(n, 1.0 / n)
