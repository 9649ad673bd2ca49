"""Memory of factorized topology priors.

Each atom stores a consensus topology, prototype node attributes and a node
measure; utility and dispersion are kept next to it as retrieval metadata.
Banks are treated as values: :func:`consolidate` returns a new bank and
leaves its input untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from .fgw import AlignmentResult, Coupling, FgwConfig, GraphView, fgw_solve
from .graph_core import FeasibilityMask, WeightedTopology

ACTIONS = ("refine", "spawn", "discard")


@dataclass(frozen=True, eq=False)
class PriorAtom:
    consensus: np.ndarray
    attributes: np.ndarray
    measure: np.ndarray

    def __post_init__(self) -> None:
        S = np.array(self.consensus, dtype=float)
        np.fill_diagonal(S, 0.0)
        object.__setattr__(self, "consensus", S)
        object.__setattr__(self, "attributes", np.atleast_2d(np.array(self.attributes, dtype=float)))
        object.__setattr__(self, "measure", np.array(self.measure, dtype=float))

    @property
    def n(self) -> int:
        return self.consensus.shape[0]

    def check(self) -> None:
        if np.any(self.measure < 0) or abs(self.measure.sum() - 1.0) > 1e-9:
            raise ValueError("atom measure is not a probability vector")
        if np.any(self.consensus < 0) or np.any(self.consensus > 1):
            raise ValueError("consensus entries outside [0, 1]")
        if self.attributes.shape[0] != self.n:
            raise ValueError("attribute rows do not match atom size")

    def view(self) -> GraphView:
        return GraphView(self.consensus, self.attributes, self.measure)


@dataclass(frozen=True)
class AtomMetadata:
    mean_utility: float
    dispersion: float = 0.0
    update_count: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.mean_utility <= 1.0:
            raise ValueError(f"mean_utility must lie in [0, 1], got {self.mean_utility}")
        if self.dispersion < 0:
            raise ValueError(f"dispersion must be >= 0, got {self.dispersion}")


@dataclass(frozen=True, eq=False)
class PriorBank:
    atoms: tuple[tuple[PriorAtom, AtomMetadata], ...] = ()
    capacity: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if len(self.atoms) > self.capacity:
            raise ValueError(f"{len(self.atoms)} atoms exceed capacity {self.capacity}")

    def __len__(self) -> int:
        return len(self.atoms)

    def to_record(self) -> dict[str, Any]:
        return {
            "capacity": self.capacity,
            "atoms": [
                {
                    "n": atom.n,
                    "d": atom.attributes.shape[1],
                    "consensus": atom.consensus.ravel().tolist(),
                    "attributes": atom.attributes.ravel().tolist(),
                    "measure": atom.measure.tolist(),
                    "mean_utility": meta.mean_utility,
                    "dispersion": meta.dispersion,
                    "update_count": meta.update_count,
                }
                for atom, meta in self.atoms
            ],
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> PriorBank:
        atoms = []
        for a in rec["atoms"]:
            n, d = int(a["n"]), int(a["d"])
            atom = PriorAtom(
                consensus=np.reshape(np.asarray(a["consensus"], dtype=float), (n, n)),
                attributes=np.reshape(np.asarray(a["attributes"], dtype=float), (n, d)),
                measure=np.asarray(a["measure"], dtype=float),
            )
            meta = AtomMetadata(
                float(a["mean_utility"]), float(a["dispersion"]), int(a["update_count"])
            )
            atoms.append((atom, meta))
        return cls(tuple(atoms), int(rec["capacity"]))


@dataclass(frozen=True)
class RetrievalConfig:
    lambda_sigma: float = 0.1
    lambda_u: float = 0.1
    fgw: FgwConfig = field(default_factory=FgwConfig)
    # rank by the entropic objective (True) or by its epsilon=0 part
    regularized_cost: bool = True

    def __post_init__(self) -> None:
        if self.lambda_sigma < 0 or self.lambda_u < 0:
            raise ValueError("retrieval weights must be >= 0")


@dataclass(frozen=True, eq=False)
class Retrieval:
    index: int
    alignment: AlignmentResult
    score: float
    scores: tuple[float, ...]
    alignments: tuple[AlignmentResult, ...]


def retrieval_score(alignment: AlignmentResult, meta: AtomMetadata,
                    config: RetrievalConfig) -> float:
    cost = alignment.cost if config.regularized_cost else alignment.transport_cost
    return cost + config.lambda_sigma * meta.dispersion - config.lambda_u * meta.mean_utility


def retrieve(bank: PriorBank, scaffold: GraphView, config: RetrievalConfig) -> Retrieval:
    """Pick the atom minimising alignment cost + dispersion - utility.

    Ties resolve to the lowest index.
    """
    if len(bank) == 0:
        raise ValueError("cannot retrieve from an empty prior bank")
    alignments = tuple(fgw_solve(scaffold, atom.view(), config.fgw) for atom, _ in bank.atoms)
    scores = tuple(
        retrieval_score(al, meta, config) for al, (_, meta) in zip(alignments, bank.atoms)
    )
    m = int(np.argmin(scores))
    return Retrieval(m, alignments[m], scores[m], scores, alignments)


def _normalize_rows(plan: np.ndarray, weights: np.ndarray, what: str) -> np.ndarray:
    """diag(weights)^-1 @ plan on the positive-mass support."""
    sums = plan.sum(axis=1)
    if np.any(np.abs(sums - weights) > 1e-6):
        raise ValueError(f"coupling {what} marginal does not match the measure")
    out = np.zeros_like(plan)
    pos = weights > 0
    out[pos] = plan[pos] / weights[pos, None]
    return out


def project_prior(atom: PriorAtom, coupling: Coupling, task_measure: np.ndarray,
                  mask: FeasibilityMask | None = None) -> WeightedTopology:
    """Push the atom's consensus into the task's agent space.

    Rows of the normalized coupling are probability vectors, so every entry
    of the result is a convex combination of consensus entries.
    """
    Tn = _normalize_rows(coupling.plan, np.asarray(task_measure, dtype=float), "row")
    C = np.clip(Tn @ atom.consensus @ Tn.T, 0.0, 1.0)
    np.fill_diagonal(C, 0.0)
    if mask is None:
        mask = FeasibilityMask.full(C.shape[0])
    return WeightedTopology(C, mask)


def reverse_transport(coupling: Coupling, posterior_mean: np.ndarray) -> np.ndarray:
    """Carry a task-space summary back into the atom's node space."""
    Q = _normalize_rows(coupling.plan.T, coupling.col_marginal, "column")
    S = np.clip(Q @ np.asarray(posterior_mean, dtype=float) @ Q.T, 0.0, 1.0)
    np.fill_diagonal(S, 0.0)
    return S


@dataclass(frozen=True, eq=False)
class Evidence:
    posterior_mean: np.ndarray
    utility: float
    alignment: AlignmentResult
    attributes: np.ndarray
    measure: np.ndarray


def structural_deviation(atom: PriorAtom, other: np.ndarray, fgw: FgwConfig) -> float:
    """epsilon=0 FGW cost between ``other`` and the atom, both carrying the atom's attributes."""
    cfg = replace(fgw, epsilon=0.0)
    view = atom.view()
    res = fgw_solve(GraphView(other, atom.attributes, atom.measure), view, cfg)
    return max(res.cost, 0.0)


def consolidate(
    bank: PriorBank,
    m_t: int,
    evidence: Evidence,
    eta: float,
    tau_u: float,
    tau_kappa: float,
    kappa_t: float,
    fgw: FgwConfig | None = None,
    lambda_sigma: float = 0.1,
) -> tuple[PriorBank, str]:
    """Fold validated posterior evidence into the bank.

    Returns the new bank and one of ``"refine"``, ``"spawn"``, ``"discard"``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    fgw = fgw or FgwConfig()
    if evidence.utility < tau_u:
        return bank, "discard"

    atoms = list(bank.atoms)
    if kappa_t <= tau_kappa:
        atom, meta = atoms[m_t]
        target = reverse_transport(evidence.alignment.coupling, evidence.posterior_mean)
        new_atom = PriorAtom(
            consensus=(1.0 - eta) * atom.consensus + eta * target,
            attributes=atom.attributes,
            measure=atom.measure,
        )
        deviation = structural_deviation(new_atom, target, fgw)
        new_meta = AtomMetadata(
            mean_utility=float(np.clip((1.0 - eta) * meta.mean_utility + eta * evidence.utility, 0.0, 1.0)),
            dispersion=(1.0 - eta) * meta.dispersion + eta * deviation,
            update_count=meta.update_count + 1,
        )
        atoms[m_t] = (new_atom, new_meta)
        return PriorBank(tuple(atoms), bank.capacity), "refine"

    spawned = PriorAtom(
        consensus=evidence.posterior_mean,
        attributes=evidence.attributes,
        measure=evidence.measure,
    )
    atoms.append((spawned, AtomMetadata(float(np.clip(evidence.utility, 0.0, 1.0)), 0.0, 0)))
    if len(atoms) > bank.capacity:
        keep = [meta.mean_utility - lambda_sigma * meta.dispersion for _, meta in atoms]
        # argmin returns the first (oldest) among ties
        del atoms[int(np.argmin(keep))]
    return PriorBank(tuple(atoms), bank.capacity), "spawn"


def initialize_bank(
    topologies: Sequence[np.ndarray],
    utilities: Sequence[float],
    attributes: np.ndarray,
    measure: np.ndarray,
    top_k: int,
    threshold: float,
    fgw: FgwConfig | None = None,
    capacity: int = 16,
) -> PriorBank:
    """Build the initial bank from base-task topologies.

    The ``top_k`` highest-utility graphs are grouped by single-linkage
    clustering on their pairwise epsilon=0 FGW distance (all graphs share the
    base task's attributes and measure); each cluster becomes one atom whose
    consensus is the entrywise mean of its members.
    """
    fgw = replace(fgw or FgwConfig(), epsilon=0.0)
    order = np.argsort(-np.asarray(utilities, dtype=float), kind="stable")[:top_k]
    members = [np.asarray(topologies[i], dtype=float) for i in order]
    utils = np.asarray(utilities, dtype=float)[order]
    k = len(members)
    if k == 0:
        raise ValueError("no topologies to initialize the bank from")

    def dist(A, B):
        res = fgw_solve(GraphView(A, attributes, measure), GraphView(B, attributes, measure), fgw)
        return max(res.cost, 0.0)

    if k == 1:
        labels = np.array([1])
    else:
        D = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                D[i, j] = D[j, i] = 0.5 * (dist(members[i], members[j]) + dist(members[j], members[i]))
        labels = fcluster(linkage(squareform(D, checks=False), method="single"),
                          t=threshold, criterion="distance")

    atoms = []
    for lab in sorted(set(labels.tolist()), key=lambda l: int(np.flatnonzero(labels == l)[0])):
        idx = np.flatnonzero(labels == lab)
        atom = PriorAtom(np.mean([members[i] for i in idx], axis=0), attributes, measure)
        spread = float(np.mean([dist(members[i], atom.consensus) for i in idx]))
        atoms.append((atom, AtomMetadata(float(np.clip(utils[idx].mean(), 0, 1)), spread, 0)))
    atoms.sort(key=lambda am: -am[1].mean_utility)
    return PriorBank(tuple(atoms[:capacity]), capacity)
