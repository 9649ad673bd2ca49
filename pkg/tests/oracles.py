"""Slow, independent reference computations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np
from scipy import integrate


def enumerate_graphs(allowed: np.ndarray) -> np.ndarray:
    """Every binary matrix supported on ``allowed``, shape (2^k, n, n)."""
    idx = np.argwhere(allowed)
    n = allowed.shape[0]
    out = np.zeros((2 ** len(idx), n, n), dtype=np.int8)
    for g, bits in enumerate(itertools.product((0, 1), repeat=len(idx))):
        for (i, j), b in zip(idx, bits):
            out[g, i, j] = b
    return out


def gibbs(Z: np.ndarray, graphs: np.ndarray) -> np.ndarray:
    """Normalized exp(<Z, B>) over an explicit list of graphs."""
    energy = np.array([float(np.sum(Z * B)) for B in graphs])
    w = np.exp(energy - energy.max())
    return w / w.sum()


def bernoulli_product(P: np.ndarray, allowed: np.ndarray, graphs: np.ndarray) -> np.ndarray:
    probs = []
    for B in graphs:
        p = 1.0
        for i, j in np.argwhere(allowed):
            p *= P[i, j] if B[i, j] else 1.0 - P[i, j]
        probs.append(p)
    return np.array(probs)


def kl_enumerated(q: np.ndarray, p: np.ndarray) -> float:
    pos = q > 0
    return float(np.sum(q[pos] * np.log(q[pos] / p[pos])))


def sinkhorn_reference(a, b, M, reg, iters=100_000, tol=1e-15) -> np.ndarray:
    """Kernel-domain Sinkhorn in extended precision (no log-domain tricks)."""
    a = np.asarray(a, dtype=np.longdouble)
    b = np.asarray(b, dtype=np.longdouble)
    K = np.exp(-np.asarray(M, dtype=np.longdouble) / np.longdouble(reg))
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
        P = u[:, None] * K * v[None, :]
        if float(np.abs(P.sum(axis=1) - a).max()) < tol:
            break
    return np.asarray(u[:, None] * K * v[None, :], dtype=float)


def entropic_linear_cost(P: np.ndarray, M: np.ndarray, reg: float) -> float:
    val = 0.0
    for i in range(P.shape[0]):
        for j in range(P.shape[1]):
            val += M[i, j] * P[i, j]
            if P[i, j] > 0:
                val += reg * P[i, j] * (np.log(P[i, j]) - 1.0)
    return val


def attr_cost_loop(X1, X2) -> np.ndarray:
    out = np.zeros((len(X1), len(X2)))
    for i in range(len(X1)):
        for j in range(len(X2)):
            out[i, j] = sum((x - y) ** 2 for x, y in zip(X1[i], X2[j]))
    return out


def gw_quadruple(C1, C2, T) -> float:
    n, m = T.shape
    total = 0.0
    for i in range(n):
        for ip in range(n):
            for j in range(m):
                for jp in range(m):
                    total += (C1[i, ip] - C2[j, jp]) ** 2 * T[i, j] * T[ip, jp]
    return total


def fgw_brute(C1, X1, C2, X2, T, rho, eps) -> float:
    val = (1 - rho) * float(np.sum(attr_cost_loop(X1, X2) * T)) + rho * gw_quadruple(C1, C2, T)
    if eps > 0:
        val += eps * sum(t * (np.log(t) - 1.0) for t in T.ravel() if t > 0)
    return val


def project_loop(T, w, S) -> np.ndarray:
    """C[i,i'] = sum_{j,j'} Tn[i,j] S[j,j'] Tn[i',j'] with Tn = diag(w)^-1 T, diagonal zeroed."""
    n, m = T.shape
    Tn = np.array([[T[i, j] / w[i] if w[i] > 0 else 0.0 for j in range(m)] for i in range(n)])
    C = np.zeros((n, n))
    for i in range(n):
        for ip in range(n):
            if i == ip:
                continue
            C[i, ip] = sum(Tn[i, j] * S[j, jp] * Tn[ip, jp] for j in range(m) for jp in range(m))
    return C


def expected_clipped(d: float, half_width: float) -> float:
    """E[clip(d + z, 0, 1)] for z ~ Uniform[-h, h]."""
    if half_width == 0:
        return float(np.clip(d, 0.0, 1.0))
    val, _ = integrate.quad(lambda z: np.clip(d + z, 0.0, 1.0), -half_width, half_width,
                            points=[-d, 1.0 - d], limit=200)
    return val / (2.0 * half_width)
