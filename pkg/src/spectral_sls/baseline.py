"""Discretize-then-optimize comparator.

The integral operator is collocated on a cell-centred lattice over the
domain, finite-horizon SLS is solved for every lattice node as a separate
disturbance column, and the resulting discrete controller is run against the
continuous-space simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .model import KernelModel, raised_cosine
from .qpsolve import KKTSystem
from .simulate import DEFAULT_GRID_N, SimState, Simulator, gains_between, rollout

__all__ = [
    "FiniteDimSystem",
    "FiniteSLS",
    "discretize",
    "finite_sls",
    "SLSRealization",
    "DiscreteController",
    "discrete_closed_loop",
    "evaluate_in_continuous",
    "state_cost_weight",
    "write_table3_csv",
    "read_table3_csv",
]


@dataclass(frozen=True, eq=False)
class FiniteDimSystem:
    dx: float
    grid: np.ndarray = field(repr=False)
    A_mat: np.ndarray = field(repr=False)
    B_mat: np.ndarray = field(repr=False)

    @property
    def n_x(self) -> int:
        return self.A_mat.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_mat.shape[1]

    def nearest_node(self, z) -> int:
        return int(np.argmin(np.sum((self.grid - np.asarray(z, dtype=float)) ** 2, axis=1)))


def _cells(width: float, dx: float) -> int:
    n = round(width / dx)
    if n < 1 or abs(n * dx - width) > 1e-9 * max(1.0, width):
        raise ValueError(f"dx={dx} does not divide the domain width {width}")
    return int(n)


def discretize(model: KernelModel, dx: float) -> FiniteDimSystem:
    """Midpoint collocation: ``A[i, j] = a(z_i - z_j) dx^2`` and ``B[i, l] = b(l, z_i)``.

    Actuators stay at their true positions; ``B`` samples their footprints
    at the lattice nodes.
    """
    dom = model.domain
    n1, n2 = _cells(dom.width1, dx), _cells(dom.width2, dx)
    c1 = dom.z1_min + (np.arange(n1) + 0.5) * dx
    c2 = dom.z2_min + (np.arange(n2) + 0.5) * dx
    g1, g2 = np.meshgrid(c1, c2, indexing="ij")
    grid = np.column_stack([g1.ravel(), g2.ravel()])
    A = raised_cosine(grid[:, 0, None] - grid[None, :, 0],
                      grid[:, 1, None] - grid[None, :, 1], model.r) * dx * dx
    B = np.stack([model.b(l, grid[:, 0], grid[:, 1]) for l in range(model.n_u)], axis=1) \
        if model.n_u else np.zeros((len(grid), 0))
    return FiniteDimSystem(float(dx), grid, A, B)


def state_cost_weight(Q: float, dx: float, model: KernelModel) -> float:
    """Lattice state weight matching the coefficient-space cost ``Q sum alpha^2``.

    ``sum_i x_i^2 dx^2`` approximates the L2 norm, and most basis modes have
    ``sum alpha^2 = 4 / (lambda1 lambda2)`` times it.
    """
    dom = model.domain
    return Q * dx * dx * 4.0 / (dom.lambda1 * dom.lambda2)


@dataclass(frozen=True, eq=False)
class FiniteSLS:
    """First block column of the optimal closed-loop maps, one column per node.

    ``phi_u[s]`` is the ``(n_u, n_x)`` input map at lag ``s``. State maps are
    applied through the exact recursion rather than stored.
    """

    sys: FiniteDimSystem
    phi_u: tuple[np.ndarray, ...]
    Q: float
    R: float

    @property
    def T(self) -> int:
        return len(self.phi_u)

    def state_response(self, w: np.ndarray) -> list[np.ndarray]:
        """``[Phi_x[0] w, ..., Phi_x[T] w]`` for one or more columns ``w``."""
        xs = [np.asarray(w, dtype=float)]
        for s in range(self.T):
            xs.append(self.sys.A_mat @ xs[-1] + self.sys.B_mat @ (self.phi_u[s] @ xs[0]))
        return xs

    def phi_x(self, s: int) -> np.ndarray:
        """Dense ``Phi_x[s]``; ``O(s n_x^3)``."""
        return self.state_response(np.eye(self.sys.n_x))[s]

    def slp_residual(self) -> float:
        """``max |Phi_x[s+1] - A Phi_x[s] - B Phi_u[s]|`` over all lags and columns.

        Built with an independent product order from :meth:`state_response`.
        """
        A, B = self.sys.A_mat, self.sys.B_mat
        phx = np.eye(self.sys.n_x)
        worst = 0.0
        lhs_prev = phx
        for s in range(self.T):
            nxt = A @ lhs_prev + B @ self.phi_u[s]
            # re-derive Phi_x[s+1] as A^(s+1) + sum_j A^(s-j) B Phi_u[j]
            direct = np.linalg.matrix_power(A, s + 1)
            for j in range(s + 1):
                direct = direct + np.linalg.matrix_power(A, s - j) @ B @ self.phi_u[j]
            worst = max(worst, float(np.max(np.abs(direct - nxt))))
            lhs_prev = nxt
        return worst


def finite_sls(sys: FiniteDimSystem, Q: float, R: float, T: int,
               method: str = "condensed") -> FiniteSLS:
    """Minimise ``Q sum_{t=1..T} |x_t|^2 + R sum_{t<T} |u_t|^2`` for every ``x_0 = e_j``.

    ``method="condensed"`` eliminates the states and solves the normal
    equations in the ``T n_u`` inputs for all columns at once;
    ``method="kkt"`` factors the sparse-state KKT system and back-solves
    each column. Both give the same maps.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not Q > 0 or R < 0:
        raise ValueError("need Q > 0 and R >= 0")
    if method == "condensed":
        U = _condensed(sys, Q, R, T)
    elif method == "kkt":
        U = _kkt(sys, Q, R, T)
    else:
        raise ValueError(f"unknown method {method!r}")
    nu = sys.n_u
    return FiniteSLS(sys, tuple(U[s * nu:(s + 1) * nu] for s in range(T)), Q, R)


def _condensed(sys, Q, R, T):
    A, B = sys.A_mat, sys.B_mat
    nx, nu = sys.n_x, sys.n_u
    if nu == 0:
        return np.zeros((0, nx))
    # G[t] maps stacked inputs to x_{t+1}
    powers_b = [B]
    for _ in range(1, T):
        powers_b.append(A @ powers_b[-1])
    H = R * np.eye(T * nu)
    F = np.zeros((T * nu, nx))
    for t in range(1, T + 1):
        G = np.zeros((nx, T * nu))
        for s in range(t):
            G[:, s * nu:(s + 1) * nu] = powers_b[t - 1 - s]
        H += Q * G.T @ G
        AtG = G
        for _ in range(t):
            AtG = A.T @ AtG
        F += Q * AtG.T
    if R == 0:
        H += 1e-10 * np.eye(T * nu)
    return -sla.solve(H, F, assume_a="pos")


def _kkt(sys, Q, R, T):
    A, B = sys.A_mat, sys.B_mat
    nx, nu = sys.n_x, sys.n_u
    eye = sp.identity(nx, format="csr")
    As, Bs = sp.csr_matrix(A), sp.csr_matrix(B)
    st = [[None] * T for _ in range(T)]
    ip = [[None] * T for _ in range(T)]
    for t in range(T):
        st[t][t] = eye
        if t:
            st[t][t - 1] = -As
        ip[t][t] = -Bs
    C = sp.hstack([sp.bmat(st), sp.bmat(ip)], format="csr")
    h = np.concatenate([np.full(T * nx, Q), np.full(T * nu, R if R > 0 else 1e-10)])
    rhs = np.zeros((T * nx, nx))
    rhs[:nx] = A
    x, _ = KKTSystem(h, C).solve(rhs)
    return x[T * nx:]


class SLSRealization:
    """Internal-model controller for :class:`FiniteSLS` acting on lattice states.

    ``w_t = x_t - sum_{s>=1} Phi_x[s] w_(t-s)`` and
    ``u_t = sum_{s>=0} Phi_u[s] w_(t-s)``; lags beyond the horizon drop out.
    """

    def __init__(self, clm: FiniteSLS):
        self.clm = clm
        self.reset()

    def reset(self) -> None:
        self.w_hist: list[np.ndarray] = []
        self._responses: list[list[np.ndarray]] = []

    def respond(self, x: np.ndarray) -> np.ndarray:
        t = len(self.w_hist)
        pred = np.zeros_like(x)
        for tau, resp in enumerate(self._responses):
            if t - tau < len(resp):
                pred += resp[t - tau]
        w = x - pred
        self.w_hist.append(w)
        self._responses.append(self.clm.state_response(w))
        u = np.zeros(self.clm.sys.n_u)
        for tau, wt in enumerate(self.w_hist):
            if t - tau < self.clm.T:
                u += self.clm.phi_u[t - tau] @ wt
        return u


def discrete_closed_loop(clm: FiniteSLS, disturbances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the realization on ``x_(t+1) = A x_t + B u_t + w_(t+1)``, ``x_0 = w_0``.

    ``disturbances`` has shape ``(T+1, n_x)``. Returns states ``(T+1, n_x)``
    and inputs ``(T, n_u)``.
    """
    A, B = clm.sys.A_mat, clm.sys.B_mat
    w = np.asarray(disturbances, dtype=float)
    ctl = SLSRealization(clm)
    xs, us = [w[0]], []
    for t in range(len(w) - 1):
        us.append(ctl.respond(xs[-1]))
        xs.append(A @ xs[-1] + B @ us[-1] + w[t + 1])
    return np.array(xs), np.array(us).reshape(len(w) - 1, clm.sys.n_u)


class DiscreteController(SLSRealization):
    """:class:`SLSRealization` reading the continuous simulator state.

    The true state is measured at the lattice nodes (``"sample"``) or
    averaged over each lattice cell (``"average"``); point masses are lumped
    onto their nearest node as ``w / dx^2``.
    """

    def __init__(self, clm: FiniteSLS, measurement: str = "sample", average_n: int = 4):
        if measurement not in ("sample", "average"):
            raise ValueError("measurement must be 'sample' or 'average'")
        self.measurement = measurement
        d = clm.sys.dx
        off = (np.arange(average_n) + 0.5) / average_n * d - d / 2
        o1, o2 = np.meshgrid(off, off, indexing="ij")
        self._offsets = np.column_stack([o1.ravel(), o2.ravel()])
        super().__init__(clm)

    def reset(self) -> None:
        super().reset()
        self._prev: tuple[SimState, np.ndarray] | None = None

    def _measure(self, state: SimState, sim: Simulator) -> np.ndarray:
        sys = self.clm.sys
        if self._prev is None:
            if np.any(state.field):
                raise ValueError("continuous evaluation expects a zero field at t=0")
            x = np.zeros(sys.n_x)
        else:
            prev, u = self._prev
            if self.measurement == "sample":
                x = sim.evaluate_next(prev, u, sys.grid)
            else:
                pts = (sys.grid[:, None, :] + self._offsets[None]).reshape(-1, 2)
                x = sim.evaluate_next(prev, u, pts).reshape(sys.n_x, -1).mean(axis=1)
        for z, w in state.impulses:
            x[sys.nearest_node(z)] += w / sys.dx ** 2
        return x

    def __call__(self, state: SimState, sim: Simulator) -> np.ndarray:
        u = self.respond(self._measure(state, sim))
        self._prev = (state, u)
        return u


def evaluate_in_continuous(sys: FiniteDimSystem, controller, model: KernelModel, zt,
                           T: int, grid_n: int = DEFAULT_GRID_N) -> tuple[float, np.ndarray]:
    """Average and per-step gain of ``controller`` on a unit point disturbance at ``zt``.

    ``controller`` is a :class:`FiniteSLS` (wrapped with node sampling), a
    :class:`DiscreteController`, or ``None`` for the zero controller.
    """
    sim = Simulator(model, grid_n, T)
    dist = {0: [((float(zt[0]), float(zt[1])), 1.0)]}
    free = rollout(sim, T, np.zeros((T, model.n_u)), disturbances=dist)
    if controller is None:
        ctl = free
    else:
        if isinstance(controller, FiniteSLS):
            controller = DiscreteController(controller)
        controller.reset()
        ctl = rollout(sim, T, policy=controller, disturbances=dist)
    gains = gains_between(ctl, free)
    return float(np.mean(gains)), gains


def write_table3_csv(path, rows) -> None:
    """``rows`` are ``(method, dx, n_x, gain)``; ``dx`` and ``n_x`` may be ``None``."""
    lines = ["method,dx,n_x,avg_perf_gain_pct"]
    for method, dx, nx, g in rows:
        lines.append(",".join([method, "" if dx is None else repr(float(dx)),
                               "" if nx is None else str(int(nx)), f"{g:.17g}"]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table3_csv(path) -> list[tuple]:
    rows = Path(path).read_text().splitlines()
    if rows[0] != "method,dx,n_x,avg_perf_gain_pct":
        raise ValueError(f"{path}: unexpected header")
    out = []
    for row in rows[1:]:
        method, dx, nx, g = row.split(",")
        out.append((method, float(dx) if dx else None, int(nx) if nx else None, float(g)))
    return out


def expected_n_x(width: float, dx: float) -> int:
    return int(round(width / dx)) ** 2


def integral_of_kernel(r: float) -> float:
    """``int a(z) dz`` over the plane for the raised cosine of radius ``r``."""
    return r * r * (math.pi / 2 - 2 / math.pi)
