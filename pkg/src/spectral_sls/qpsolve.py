"""Equality-constrained QP with diagonal Hessian, solved through the KKT system.

Problem form::

    minimize    x' diag(h) x
    subject to  A x = b

Stationarity is ``2 diag(h) x + A' mu = 0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "EqConstrainedQP",
    "QPSolution",
    "KKTError",
    "KKTSystem",
    "solve",
    "solve_with_R_zero",
    "write_triplets",
]

DENSE_KKT_MAX = 2000
RANK_TOL = 1e-10
TIE_BREAK = 1e-10


class KKTError(RuntimeError):
    """Singular or inconsistent KKT system."""

    def __init__(self, msg: str, rank_defect: int | None = None):
        super().__init__(msg)
        self.rank_defect = rank_defect


@dataclass(frozen=True, eq=False)
class EqConstrainedQP:
    H_diag: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.H_diag, dtype=float).ravel()
        a = sp.csr_matrix(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).ravel()
        if a.shape != (b.size, h.size):
            raise ValueError(f"shape mismatch: A {a.shape}, b {b.size}, H {h.size}")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(a.data)) and np.all(np.isfinite(b))):
            raise ValueError("QP data must be finite")
        if np.any(h < 0):
            raise ValueError("H_diag must be nonnegative")
        object.__setattr__(self, "H_diag", h)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.H_diag.size

    def objective(self, x: np.ndarray) -> float:
        return float(np.dot(self.H_diag, x * x))


@dataclass(frozen=True, eq=False)
class QPSolution:
    x: np.ndarray
    multipliers: np.ndarray
    primal_residual: float
    stationarity_residual: float


def _independent_rows(A: sp.csr_matrix) -> np.ndarray:
    """Indices of a maximal set of linearly independent rows (pivoted QR)."""
    dense = A.toarray()
    if dense.shape[0] == 0:
        return np.arange(0)
    _, r, piv = sla.qr(dense.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > RANK_TOL * max(d[0], 1.0))) if d.size else 0
    return np.sort(piv[:rank])


class KKTSystem:
    """Factorised KKT matrix for a fixed ``(H, A)``; solves for many right-hand sides."""

    def __init__(self, H_diag: np.ndarray, A: sp.csr_matrix):
        self.H_diag = np.asarray(H_diag, dtype=float)
        # small but positive weights produce legitimately small pivots
        positive = self.H_diag[self.H_diag > 0]
        self.pivot_tol = RANK_TOL * min(1.0, 2 * positive.min()) if positive.size else RANK_TOL
        A = sp.csr_matrix(A)
        self.rows = np.arange(A.shape[0])
        self.dropped = np.arange(0)
        try:
            self._factor(A)
        except KKTError:
            if A.shape[0] > 5 * DENSE_KKT_MAX:
                raise
            keep = _independent_rows(A)
            if keep.size == A.shape[0]:
                raise
            self.rows = keep
            self.dropped = np.setdiff1d(np.arange(A.shape[0]), keep)
            self._factor(A[keep])
        self.A = A

    def _factor(self, A: sp.csr_matrix) -> None:
        n, m = self.H_diag.size, A.shape[0]
        kkt = sp.bmat([[sp.diags(2 * self.H_diag), A.T], [A, None]], format="csc")
        self.n, self.m = n, m
        if n + m <= DENSE_KKT_MAX:
            mat = kkt.toarray()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(mat, check_finite=False)
            d = np.abs(np.diag(lu))
            tol = self.pivot_tol * max(d.max(initial=0.0), 1.0)
            if d.size and d.min() <= tol:
                raise KKTError("KKT matrix is singular", rank_defect=int(np.sum(d <= tol)))
            self._solve = lambda rhs: sla.lu_solve((lu, piv), rhs, check_finite=False)
        else:
            try:
                lu = spla.splu(kkt, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise KKTError(f"KKT matrix is singular ({exc})") from exc
            u = np.abs(lu.U.diagonal())
            tol = self.pivot_tol * max(u.max(), 1.0)
            if u.min() <= tol:
                raise KKTError("KKT matrix is numerically singular", rank_defect=int(np.sum(u <= tol)))
            self._solve = lu.solve

    def solve(self, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Primal and multipliers for right-hand side(s) ``b`` (vector or columns)."""
        b = np.asarray(b, dtype=float)
        cols = b.ndim == 2
        B = b if cols else b[:, None]
        if self.dropped.size:
            resid = self.A[self.dropped] @ _lstsq_pick(self, B) - B[self.dropped]
            if np.max(np.abs(resid), initial=0.0) > 1e-8 * (1 + np.max(np.abs(B))):
                raise KKTError("inconsistent redundant constraints")
        rhs = np.vstack([np.zeros((self.n, B.shape[1])), B[self.rows]])
        sol = self._solve(rhs)
        x, mu_kept = sol[:self.n], sol[self.n:]
        mu = np.zeros((self.A.shape[0], B.shape[1]))
        mu[self.rows] = mu_kept
        return (x, mu) if cols else (x[:, 0], mu[:, 0])


def _lstsq_pick(system: KKTSystem, B: np.ndarray) -> np.ndarray:
    rhs = np.vstack([np.zeros((system.n, B.shape[1])), B[system.rows]])
    return system._solve(rhs)[:system.n]


def _finish(qp: EqConstrainedQP, x: np.ndarray, mu: np.ndarray) -> QPSolution:
    primal = float(np.max(np.abs(qp.A @ x - qp.b), initial=0.0))
    stat = float(np.max(np.abs(2 * qp.H_diag * x + qp.A.T @ mu), initial=0.0))
    return QPSolution(x, mu, primal, stat)


def solve(qp: EqConstrainedQP) -> QPSolution:
    """Unique KKT point; raises :class:`KKTError` when ``H`` is singular on ``null(A)``."""
    x, mu = KKTSystem(qp.H_diag, qp.A).solve(qp.b)
    return _finish(qp, x, mu)


def solve_with_R_zero(qp: EqConstrainedQP) -> QPSolution:
    """Like :func:`solve`, but zero weights get a ``1e-10`` tie-break.

    Among minimisers of the weighted cost this returns (to within the
    tie-break) the one of least norm on the zero-weight coordinates.
    """
    h = qp.H_diag.copy()
    h[h == 0] = TIE_BREAK
    x, mu = KKTSystem(h, qp.A).solve(qp.b)
    sol = _finish(EqConstrainedQP(h, qp.A, qp.b), x, mu)
    return sol


def write_triplets(path, qp: EqConstrainedQP) -> None:
    """Dump ``(H, A, b)`` as ``kind,row,col,value`` rows (17 significant digits)."""
    lines = ["kind,row,col,value"]
    for j, h in enumerate(qp.H_diag):
        lines.append(f"H,{j},{j},{h:.17g}")
    coo = qp.A.tocoo()
    for i, j, v in zip(coo.row, coo.col, coo.data):
        lines.append(f"A,{i},{j},{v:.17g}")
    for i, v in enumerate(qp.b):
        lines.append(f"b,{i},0,{v:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
