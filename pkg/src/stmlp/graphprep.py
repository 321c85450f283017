"""Predefined-graph matrix: Gaussian-kernel adjacency -> normalized -> scaled Laplacian."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    pass


class PowerIterationError(RuntimeError):
    """Power iteration did not settle; ``estimate`` holds the last value."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


def build_weighted_adjacency(edges, n_nodes: int, kappa: float = 0.1) -> np.ndarray:
    """Thresholded Gaussian kernel ``exp(-dist^2 / sigma^2)`` over an edge list.

    ``sigma`` is the standard deviation of all supplied distances. When it is
    zero, edges with distance 0 get weight 1 and all others 0.
    """
    W = np.zeros((n_nodes, n_nodes))
    edges = [(int(i), int(j), float(d)) for i, j, d in edges]
    if not edges:
        return W
    for i, j, d in edges:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise GraphError(f"edge ({i}, {j}) out of range for {n_nodes} nodes")
        if d < 0:
            raise GraphError(f"negative distance on edge ({i}, {j})")
    dist = np.array([d for _, _, d in edges])
    sigma = dist.std()
    for (i, j, _), d in zip(edges, dist):
        if sigma > 0:
            w = np.exp(-(d * d) / (sigma * sigma))
        else:
            w = 1.0 if d == 0 else 0.0
        W[i, j] = max(W[i, j], w)
    W[W < kappa] = 0.0
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 0.0)
    return W


def normalized_laplacian(W: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """``I - D^-1/2 W D^-1/2``; isolated nodes keep an identity row."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise GraphError(f"adjacency must be square, got {W.shape}")
    if np.max(np.abs(W - W.T), initial=0.0) > atol:
        raise GraphError("adjacency is not symmetric")
    deg = W.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    L = np.eye(W.shape[0]) - inv_sqrt[:, None] * W * inv_sqrt[None, :]
    return L


def largest_eigenvalue(L: np.ndarray, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Convergence is declared when the Rayleigh quotient changes by less than
    ``tol`` relative to its magnitude.
    """
    n = L.shape[0]
    if n == 0:
        raise GraphError("empty matrix")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = float(v @ L @ v)
    for _ in range(max_iter):
        w = L @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ L @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    raise PowerIterationError(f"power iteration did not converge in {max_iter} iterations", lam)


def scale_laplacian(L: np.ndarray, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0) -> np.ndarray:
    """Map the spectrum of ``L`` into [-1, 1]: ``2 L / lambda_max - I``."""
    L = np.asarray(L, dtype=np.float64)
    # L is PSD, so the dominant eigenvalue found by power iteration is the largest
    lam = largest_eigenvalue(L, tol, max_iter, seed)
    if lam <= 0:
        raise GraphError(f"largest eigenvalue must be positive, got {lam}")
    return (2.0 / lam) * L - np.eye(L.shape[0])


def scaled_laplacian_from_adjacency(W: np.ndarray, **kw) -> np.ndarray:
    return scale_laplacian(normalized_laplacian(W), **kw)


# file ingestion ----------------------------------------------------------

def read_edge_list(path: str | Path) -> list[tuple[int, int, float]]:
    """Read ``from,to,distance`` records; a non-numeric first line is a header."""
    edges = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                i, j, d = int(float(row[0])), int(float(row[1])), float(row[2])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise GraphError(f"{path}:{lineno}: cannot parse edge record {row!r}") from None
            edges.append((i, j, d))
    return edges


def read_matrix(path: str | Path) -> np.ndarray:
    """Load a precomputed N x N weight matrix (.npy or comma-separated text)."""
    path = Path(path)
    if path.suffix == ".npy":
        M = np.load(path)
    else:
        M = np.loadtxt(path, delimiter=",", ndmin=2)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise GraphError(f"{path}: matrix must be square, got {M.shape}")
    return M.astype(np.float64)


def load_graph(path: str | Path, n_nodes: int, fmt: str = "edges", kappa: float = 0.1) -> np.ndarray:
    """Scaled Laplacian for an edge-list or matrix file."""
    if fmt == "edges":
        W = build_weighted_adjacency(read_edge_list(path), n_nodes, kappa)
    elif fmt == "matrix":
        W = read_matrix(path)
        if W.shape[0] != n_nodes:
            raise GraphError(f"{path}: matrix has {W.shape[0]} nodes, expected {n_nodes}")
        W = np.maximum(W, W.T)
        np.fill_diagonal(W, 0.0)
    else:
        raise GraphError(f"unknown graph format {fmt!r}")
    return scaled_laplacian_from_adjacency(W)
