"""Randomized finite-dimensional checks of the state- and output-feedback SLP theorems.

Two matrix transcriptions are supported.

``"adjoint"``
    Operators act on test functions: ``x = Ax' x + Bx' u + w`` with stacked
    ``Ax`` strictly upper block-bidiagonal (blocks ``Ad'``), ``Bx`` likewise
    (blocks ``Bd'``), ``Cx = blkdiag(Cd')`` and controllers
    upper block-triangular with ``u = K' x`` (or ``u = K' y``).
``"standard"``
    The usual SLS form: lower block-bidiagonal ``A`` (blocks ``Ad``),
    ``x = A x + B u + w``, ``y = C x + w_y``, ``u = K x`` (or ``K y``)
    with lower block-triangular ``K``.

The stack has ``T + 1`` time blocks, ``t = 0..T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "StackedOperators",
    "CLMSet",
    "random_system",
    "stack_operators",
    "clm_from_controller_sf",
    "clm_from_controller_of",
    "clm_from_free_parameter_sf",
    "clm_from_free_parameter_of",
    "check_sf",
    "check_of",
    "trajectory_equivalence",
    "run_suite",
]

CONVENTIONS = ("adjoint", "standard")
TOL = 1e-10


@dataclass(frozen=True, eq=False)
class StackedOperators:
    T: int
    n: int
    n_u: int
    p: int
    A_blk: np.ndarray
    B_blk: np.ndarray
    C_blk: np.ndarray
    K_blk: np.ndarray
    convention: str = "adjoint"
    output_feedback: bool = False

    @property
    def upper(self) -> bool:
        return self.convention == "adjoint"


@dataclass(frozen=True, eq=False)
class CLMSet:
    theta_x: np.ndarray | None = None
    theta_u: np.ndarray | None = None
    theta_xx: np.ndarray | None = None
    theta_xy: np.ndarray | None = None
    theta_ux: np.ndarray | None = None
    theta_uy: np.ndarray | None = None


def _shift_blocks(block: np.ndarray, N: int, upper: bool) -> np.ndarray:
    """``N x N`` block matrix with ``block`` on the super- (or sub-) diagonal."""
    r, c = block.shape
    out = np.zeros((N * r, N * c))
    for t in range(N - 1):
        i, j = (t, t + 1) if upper else (t + 1, t)
        out[i * r:(i + 1) * r, j * c:(j + 1) * c] = block
    return out


def _block_triangular(rng, N: int, r: int, c: int, upper: bool, scale: float) -> np.ndarray:
    out = np.zeros((N * r, N * c))
    for i in range(N):
        for j in range(N):
            if (j >= i) if upper else (j <= i):
                out[i * r:(i + 1) * r, j * c:(j + 1) * c] = rng.uniform(-scale, scale, (r, c))
    return out


def random_system(rng: np.random.Generator, max_n: int = 4, max_T: int = 4):
    """``(Ad, Bd, Cd, T)`` with uniform entries and ``Ad`` scaled to spectral radius 0.9."""
    n, n_u, p = (int(rng.integers(1, max_n + 1)) for _ in range(3))
    T = int(rng.integers(1, max_T + 1))
    Ad = rng.uniform(-1, 1, (n, n))
    rho = max(abs(np.linalg.eigvals(Ad)))
    if rho > 0:
        Ad *= 0.9 / rho
    return Ad, rng.uniform(-1, 1, (n, n_u)), rng.uniform(-1, 1, (p, n)), T


def stack_operators(Ad, Bd, Cd, T: int, K_blk: np.ndarray, convention: str = "adjoint",
                    output_feedback: bool = False) -> StackedOperators:
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    N, upper = T + 1, convention == "adjoint"
    n, n_u = Bd.shape
    p = Cd.shape[0]
    if upper:
        A = _shift_blocks(Ad.T, N, True)
        B = _shift_blocks(Bd.T, N, True)
        C = np.kron(np.eye(N), Cd.T)
    else:
        A = _shift_blocks(Ad, N, False)
        B = _shift_blocks(Bd, N, False)
        C = np.kron(np.eye(N), Cd)
    return StackedOperators(T, n, n_u, p, A, B, C, np.asarray(K_blk, dtype=float),
                            convention, output_feedback)


def random_controller(rng, Ad, Bd, Cd, T, convention="adjoint", output_feedback=False,
                      scale=0.5) -> StackedOperators:
    N, upper = T + 1, convention == "adjoint"
    n, n_u = Bd.shape
    rows = Cd.shape[0] if output_feedback else n
    if upper:
        K = _block_triangular(rng, N, rows, n_u, True, scale)
    else:
        K = _block_triangular(rng, N, n_u, rows, False, scale)
    return stack_operators(Ad, Bd, Cd, T, K, convention, output_feedback)


def _tri_inv(M: np.ndarray, upper: bool) -> np.ndarray:
    return solve_triangular(M, np.eye(M.shape[0]), lower=not upper)


def clm_from_controller_sf(ops: StackedOperators) -> CLMSet:
    A, B, K = ops.A_blk, ops.B_blk, ops.K_blk
    eye = np.eye(A.shape[0])
    if ops.upper:
        tx = _tri_inv(eye - A - K @ B, True)
        return CLMSet(theta_x=tx, theta_u=tx @ K)
    px = _tri_inv(eye - A - B @ K, False)
    return CLMSet(theta_x=px, theta_u=K @ px)


def clm_from_controller_of(ops: StackedOperators) -> CLMSet:
    A, B, C, K = ops.A_blk, ops.B_blk, ops.C_blk, ops.K_blk
    eye = np.eye(A.shape[0])
    if ops.upper:
        inv = _tri_inv(eye - A - C @ K @ B, True)
        return CLMSet(theta_xx=inv, theta_xy=K @ B @ inv, theta_ux=inv @ C @ K,
                      theta_uy=K @ B @ inv @ C @ K + K)
    inv = _tri_inv(eye - A - B @ K @ C, False)
    return CLMSet(theta_xx=inv, theta_xy=inv @ B @ K, theta_ux=K @ C @ inv,
                  theta_uy=K @ C @ inv @ B @ K + K)


def clm_from_free_parameter_sf(ops: StackedOperators, theta_u: np.ndarray) -> CLMSet:
    """The SLP solution with prescribed (causal) input map."""
    A, B = ops.A_blk, ops.B_blk
    eye = np.eye(A.shape[0])
    res = _tri_inv(eye - A, ops.upper)
    if ops.upper:
        return CLMSet(theta_x=(eye + theta_u @ B) @ res, theta_u=theta_u)
    return CLMSet(theta_x=res @ (eye + B @ theta_u), theta_u=theta_u)


def clm_from_free_parameter_of(ops: StackedOperators, theta_uy: np.ndarray) -> CLMSet:
    """The output-feedback SLP solution with prescribed (causal) ``theta_uy``."""
    A, B, C = ops.A_blk, ops.B_blk, ops.C_blk
    res = _tri_inv(np.eye(A.shape[0]) - A, ops.upper)
    if ops.upper:
        return CLMSet(theta_xx=res + res @ C @ theta_uy @ B @ res,
                      theta_xy=theta_uy @ B @ res, theta_ux=res @ C @ theta_uy,
                      theta_uy=theta_uy)
    return CLMSet(theta_xx=res + res @ B @ theta_uy @ C @ res,
                  theta_xy=res @ B @ theta_uy, theta_ux=theta_uy @ C @ res,
                  theta_uy=theta_uy)


def _maxabs(M) -> float:
    return float(np.max(np.abs(M), initial=0.0))


def _is_causal(M: np.ndarray, N: int, upper: bool) -> bool:
    r, c = M.shape[0] // N, M.shape[1] // N
    for i in range(N):
        for j in range(N):
            if ((j < i) if upper else (j > i)) and np.any(M[i * r:(i + 1) * r, j * c:(j + 1) * c]):
                return False
    return True


def check_sf(ops: StackedOperators, clm: CLMSet) -> dict[str, float]:
    """Residuals of the SLP identity and of controller recovery."""
    A, B = ops.A_blk, ops.B_blk
    tx, tu = clm.theta_x, clm.theta_u
    eye = np.eye(A.shape[0])
    if ops.upper:
        slp = tx - tx @ A - tu @ B - eye
        recovered = _tri_inv(tx, True) @ tu
    else:
        slp = tx - A @ tx - B @ tu - eye
        recovered = tu @ _tri_inv(tx, False)
    return {"slp": _maxabs(slp), "recovery": _maxabs(recovered - ops.K_blk)}


def recovered_controller(ops: StackedOperators, clm: CLMSet) -> np.ndarray:
    if ops.output_feedback:
        if ops.upper:
            return clm.theta_uy - clm.theta_xy @ _tri_inv(clm.theta_xx, True) @ clm.theta_ux
        return clm.theta_uy - clm.theta_ux @ _tri_inv(clm.theta_xx, False) @ clm.theta_xy
    if ops.upper:
        return _tri_inv(clm.theta_x, True) @ clm.theta_u
    return clm.theta_u @ _tri_inv(clm.theta_x, False)


def check_of(ops: StackedOperators, clm: CLMSet) -> dict[str, float]:
    """Residuals of the four output-feedback identities and of controller recovery."""
    A, B, C = ops.A_blk, ops.B_blk, ops.C_blk
    xx, xy, ux, uy = clm.theta_xx, clm.theta_xy, clm.theta_ux, clm.theta_uy
    eye = np.eye(A.shape[0])
    if ops.upper:
        res = {
            "a": xx - xx @ A - ux @ B - eye,
            "b": xy - xy @ A - uy @ B,
            "c": xx - A @ xx - C @ xy - eye,
            "d": ux - A @ ux - C @ uy,
        }
    else:
        res = {
            "a": xx - A @ xx - B @ ux - eye,
            "b": xy - A @ xy - B @ uy,
            "c": xx - xx @ A - xy @ C - eye,
            "d": ux - ux @ A - uy @ C,
        }
    out = {k: _maxabs(v) for k, v in res.items()}
    out["recovery"] = _maxabs(recovered_controller(ops, clm) - ops.K_blk)
    return out


def trajectory_equivalence(ops: StackedOperators, clm: CLMSet, w_x: np.ndarray,
                           w_y: np.ndarray | None = None,
                           K: np.ndarray | None = None) -> dict[str, float]:
    """Dynamics and controller residuals of the trajectory the CLMs assign to ``w``.

    ``K`` defaults to the controller stored in ``ops``; pass the recovered
    controller to check the reverse direction of the theorems.
    """
    A, B, C = ops.A_blk, ops.B_blk, ops.C_blk
    K = ops.K_blk if K is None else K
    tr = (lambda M: M.T) if ops.upper else (lambda M: M)
    if ops.output_feedback:
        w_y = np.zeros(C.shape[1] if ops.upper else C.shape[0]) if w_y is None else w_y
        x = tr(clm.theta_xx) @ w_x + tr(clm.theta_xy) @ w_y
        u = tr(clm.theta_ux) @ w_x + tr(clm.theta_uy) @ w_y
        y = tr(C) @ x + w_y
        ctrl = u - tr(K) @ y
    else:
        x = tr(clm.theta_x) @ w_x
        u = tr(clm.theta_u) @ w_x
        ctrl = u - tr(K) @ x
    dyn = x - tr(A) @ x - tr(B) @ u - w_x
    return {"dynamics": _maxabs(dyn), "controller": _maxabs(ctrl)}


def _draw_case(rng, convention):
    Ad, Bd, Cd, T = random_system(rng)
    N, upper = T + 1, convention == "adjoint"
    n, n_u = Bd.shape
    p = Cd.shape[0]
    results = {}

    sf = random_controller(rng, Ad, Bd, Cd, T, convention, False)
    clm = clm_from_controller_sf(sf)
    w = rng.uniform(-1, 1, N * n)
    results["sf_forward"] = {**check_sf(sf, clm), **trajectory_equivalence(sf, clm, w)}
    results["sf_forward"]["causal"] = 0.0 if _is_causal(clm.theta_x, N, upper) else 1.0

    tu = (_block_triangular(rng, N, n, n_u, True, 0.5) if upper
          else _block_triangular(rng, N, n_u, n, False, 0.5))
    free = clm_from_free_parameter_sf(sf, tu)
    k_rec = recovered_controller(sf, free)
    rev = stack_operators(Ad, Bd, Cd, T, k_rec, convention, False)
    results["sf_reverse"] = {"slp": check_sf(rev, free)["slp"],
                             **trajectory_equivalence(rev, free, w),
                             "causal": 0.0 if _is_causal(k_rec, N, upper) else 1.0}

    of = random_controller(rng, Ad, Bd, Cd, T, convention, True)
    clm = clm_from_controller_of(of)
    wx, wy = rng.uniform(-1, 1, N * n), rng.uniform(-1, 1, N * p)
    results["of_forward"] = {**check_of(of, clm), **trajectory_equivalence(of, clm, wx, wy)}

    tuy = (_block_triangular(rng, N, p, n_u, True, 0.5) if upper
           else _block_triangular(rng, N, n_u, p, False, 0.5))
    free = clm_from_free_parameter_of(of, tuy)
    k_rec = recovered_controller(of, free)
    rev = stack_operators(Ad, Bd, Cd, T, k_rec, convention, True)
    chk = check_of(rev, free)
    chk.pop("recovery")
    results["of_reverse"] = {**chk, **trajectory_equivalence(rev, free, wx, wy),
                             "causal": 0.0 if _is_causal(k_rec, N, upper) else 1.0}
    return results


def run_suite(n_draws: int = 200, seed: int = 0, convention: str = "adjoint",
              tol: float = TOL) -> dict:
    """Run both theorems in both directions on ``n_draws`` random systems.

    Returns the worst residual per check and the list of failing draw indices.
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    failures = []
    for i in range(n_draws):
        res = _draw_case(rng, convention)
        ok = True
        for group, checks in res.items():
            for name, val in checks.items():
                key = f"{group}.{name}"
                worst[key] = max(worst.get(key, 0.0), val)
                ok &= val <= tol
        if not ok:
            failures.append(i)
    return {"n_draws": n_draws, "worst": worst, "failures": failures,
            "passed": not failures}
