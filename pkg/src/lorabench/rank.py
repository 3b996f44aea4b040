"""Singular values and effective-rank metrics for weight deltas.

svd_values runs a one-sided Jacobi iteration (simple, provably
convergent at these sizes); svd_values_eigh is an independent
eigendecomposition route kept for cross-checks. Effective rank follows
the Roy-Vetterli construction: exponent of the Shannon entropy of the
normalized spectrum. The cutoff rank counts singular values above a
fraction tau of the largest.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import Adapter, delta_matrix, load_adapter
from .errors import ContractError, ConvergenceError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60

DEFAULT_TAU = 0.01


@dataclass
class RankReport:
    layer: str
    singular_values: list[float] = field(default_factory=list)
    erank_shannon: float | None = None
    cutoff_rank: int | None = None
    tau: float = DEFAULT_TAU
    error: str | None = None


def svd_values(M, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Descending singular values of a real matrix by one-sided Jacobi.

    Columns are rotated pairwise until every pair is orthogonal to a
    relative tolerance; the column norms are then the singular values.
    Raises with the residual if the sweep cap is hit first.
    """
    A = np.asarray(getattr(M, "data", M), dtype=np.float64)
    if A.ndim != 2:
        raise ContractError(f"svd_values expects a matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError("svd_values: non-finite entries")
    if A.shape[0] < A.shape[1]:
        A = A.T
    A = A.copy()
    n, m = A.shape
    if m == 0:
        return np.zeros(0)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(m - 1):
            for q in range(p + 1, m):
                ap = A[:, p]
                aq = A[:, q]
                gamma = float(ap @ aq)
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                if gamma * gamma <= tol * tol * alpha * beta:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                A[:, p] = new_p
                A[:, q] = new_q
        if not rotated:
            break
    else:
        residual = _max_relative_offdiag(A)
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {max_sweeps} sweeps", residual=residual)
    sigma = np.sqrt((A * A).sum(axis=0))
    return np.sort(sigma)[::-1].copy()


def _max_relative_offdiag(A: np.ndarray) -> float:
    norms = np.sqrt((A * A).sum(axis=0))
    worst = 0.0
    m = A.shape[1]
    for p in range(m - 1):
        for q in range(p + 1, m):
            denom = norms[p] * norms[q]
            if denom == 0:
                continue
            worst = max(worst, abs(float(A[:, p] @ A[:, q])) / denom)
    return worst


def svd_values_eigh(M) -> np.ndarray:
    """Independent route: sqrt of the eigenvalues of M^T M (or M M^T)."""
    A = np.asarray(getattr(M, "data", M), dtype=np.float64)
    if A.shape[0] < A.shape[1]:
        A = A.T
    evals = np.linalg.eigvalsh(A.T @ A)
    return np.sqrt(np.clip(evals, 0.0, None))[::-1].copy()


def effective_rank_shannon(sigma) -> float:
    """exp of the Shannon entropy of the sigma distribution (0 ln 0 := 0)."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1:
        raise ContractError(f"expected a 1-d spectrum, got shape {s.shape}")
    if np.any(s < 0):
        raise ContractError("singular values must be nonnegative")
    total = s.sum()
    if total == 0:
        raise ContractError("effective rank undefined for an all-zero spectrum")
    pos = s[s > 0]
    if np.all(pos == pos[0]):
        # flat spectrum: exp(entropy) is exactly the count, skip the rounding
        return float(pos.size)
    p = pos / total
    return float(np.exp(-(p * np.log(p)).sum()))


def cutoff_rank(sigma, tau: float = DEFAULT_TAU) -> int:
    """Count of singular values above tau times the largest."""
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must be in (0,1), got {tau}")
    s = np.asarray(sigma, dtype=np.float64)
    if s.size == 0 or s.max() == 0:
        return 0
    return int((s > tau * s.max()).sum())


def analyze_adapter(adapter, tau: float = DEFAULT_TAU) -> tuple[list[RankReport], dict]:
    """Rank metrics of every adapted layer's delta matrix, plus means.

    Accepts an Adapter or a checkpoint path. All-zero deltas (an
    untrained adapter) produce a per-layer error entry and are excluded
    from the summary means.
    """
    if not isinstance(adapter, Adapter):
        adapter = load_adapter(adapter)
    reports = []
    for (li, tgt) in sorted(adapter.layers):
        name = f"layer{li}.{tgt}"
        delta = delta_matrix(adapter, li, tgt)
        if not np.any(delta):
            reports.append(RankReport(layer=name, tau=tau,
                                      error="all-zero delta; rank metrics undefined"))
            continue
        sigma = svd_values(delta)
        reports.append(RankReport(
            layer=name,
            singular_values=[float(x) for x in sigma],
            erank_shannon=effective_rank_shannon(sigma),
            cutoff_rank=cutoff_rank(sigma, tau),
            tau=tau,
        ))
    valid = [r for r in reports if r.error is None]
    summary = {
        "tau": tau,
        "layers": len(reports),
        "layers_valid": len(valid),
        "mean_erank_shannon": (sum(r.erank_shannon for r in valid) / len(valid)
                               if valid else float("nan")),
        "mean_cutoff_rank": (sum(r.cutoff_rank for r in valid) / len(valid)
                             if valid else float("nan")),
    }
    return reports, summary


def write_rank_csv(reports: list[RankReport], summary: dict, path) -> None:
    """One row per layer, then a MEAN row; undefined metrics left empty."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "sigma_count", "erank_shannon", "cutoff_rank", "tau"])
        for r in reports:
            if r.error is not None:
                w.writerow([r.layer, 0, "", "", r.tau])
            else:
                w.writerow([r.layer, len(r.singular_values),
                            f"{r.erank_shannon:.6f}", r.cutoff_rank, r.tau])
        mean_e = summary["mean_erank_shannon"]
        mean_c = summary["mean_cutoff_rank"]
        if summary["layers_valid"] > 0:
            w.writerow(["MEAN", "", f"{mean_e:.6f}", f"{mean_c:.6f}", summary["tau"]])
        else:
            w.writerow(["MEAN", "", "", "", summary["tau"]])
