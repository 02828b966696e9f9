"""Grid-based rollout of the true dynamics and the metrics computed from it.

The simulator never touches basis coefficients. Convolution is evaluated by
midpoint quadrature on a uniform lattice aligned with the domain cells, and
actuator footprints are sampled pointwise from the raw kernel.

A state is a lattice field plus a list of point masses. A point mass of
weight ``w`` at ``z`` (a scaled delta) is exact data: its image after one
step is ``w a(. - z)``.

Three lattice regions are offered:

``plane``
    Free space. The lattice extends ``ceil(horizon r / dx)`` cells beyond
    the domain, enough that values on the domain are exact (up to
    quadrature) for ``horizon`` steps.
``domain``
    The domain only; mass leaving it is lost.
``cell``
    The full period cell with periodic wrap. This is what the truncated
    basis represents, so it is the right region for spectral cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .model import KernelModel, raised_cosine
from .spectral import SpectralField, synthesize_tensor

__all__ = [
    "SimState",
    "Simulator",
    "TrajectoryGrid",
    "DegenerateTrajectoryError",
    "rollout",
    "predicted_errors",
    "basis_accuracy",
    "performance_gain",
    "gains_between",
    "mean_performance_gain",
    "write_table1_csv",
    "read_table1_csv",
    "write_grid_dump",
]

DEFAULT_GRID_N = 80
REGIONS = ("plane", "domain", "cell")

Impulse = tuple[tuple[float, float], float]


class DegenerateTrajectoryError(ValueError):
    """A reference norm in a relative metric is zero."""


@dataclass(frozen=True, eq=False)
class SimState:
    t: int
    field: np.ndarray
    impulses: tuple[Impulse, ...] = ()


class Simulator:
    """Quadrature dynamics on a fixed lattice.

    Parameters
    ----------
    model
        Only ``r``, ``domain`` and ``actuators`` are read.
    grid_n
        Cells per axis across the domain.
    horizon
        Number of steps the ``plane`` padding must cover.
    region
        ``"plane"``, ``"domain"`` or ``"cell"``.
    """

    def __init__(self, model: KernelModel, grid_n: int = DEFAULT_GRID_N,
                 horizon: int = 5, region: str = "plane"):
        if region not in REGIONS:
            raise ValueError(f"region must be one of {REGIONS}")
        if grid_n < 1:
            raise ValueError("grid_n must be positive")
        self.model, self.grid_n, self.horizon, self.region = model, int(grid_n), int(horizon), region
        dom = model.domain
        self.dx1, self.dx2 = dom.width1 / grid_n, dom.width2 / grid_n
        if region == "plane":
            p1 = math.ceil(horizon * model.r / self.dx1 - 1e-9)
            p2 = math.ceil(horizon * model.r / self.dx2 - 1e-9)
            pads = (p1, p1, p2, p2)
        elif region == "domain":
            pads = (0, 0, 0, 0)
        else:
            pads = (_cells((dom.z1_min + dom.lambda1 / 2) / self.dx1),
                    _cells((dom.lambda1 / 2 - dom.z1_max) / self.dx1),
                    _cells((dom.z2_min + dom.lambda2 / 2) / self.dx2),
                    _cells((dom.lambda2 / 2 - dom.z2_max) / self.dx2))
        self.pads = pads
        n1, n2 = grid_n + pads[0] + pads[1], grid_n + pads[2] + pads[3]
        self.g1 = dom.z1_min + (np.arange(n1) - pads[0] + 0.5) * self.dx1
        self.g2 = dom.z2_min + (np.arange(n2) - pads[2] + 0.5) * self.dx2
        self.shape = (n1, n2)
        self.omega = (slice(pads[0], pads[0] + grid_n), slice(pads[2], pads[2] + grid_n))
        self.Z1, self.Z2 = np.meshgrid(self.g1, self.g2, indexing="ij")
        self.footprints = np.stack([self.model.b(l, self.Z1, self.Z2) for l in range(model.n_u)]) \
            if model.n_u else np.zeros((0, n1, n2))
        self._build_kernel()

    def _build_kernel(self) -> None:
        r, w = self.model.r, self.dx1 * self.dx2
        if self.region == "cell":
            n1, n2 = self.shape
            o1 = (np.fft.fftfreq(n1) * n1) * self.dx1
            o2 = (np.fft.fftfreq(n2) * n2) * self.dx2
            ker = raised_cosine(o1[:, None], o2[None, :], r) * w
            self._kernel_hat = np.fft.rfft2(ker)
        else:
            h1, h2 = math.ceil(r / self.dx1), math.ceil(r / self.dx2)
            o1, o2 = np.arange(-h1, h1 + 1) * self.dx1, np.arange(-h2, h2 + 1) * self.dx2
            self._kernel = raised_cosine(o1[:, None], o2[None, :], r) * w

    @property
    def omega_axes(self) -> tuple[np.ndarray, np.ndarray]:
        return self.g1[self.omega[0]], self.g2[self.omega[1]]

    def crop(self, fld: np.ndarray) -> np.ndarray:
        """Restriction of a lattice field to the domain cells."""
        return fld[self.omega]

    def zero_state(self) -> SimState:
        return SimState(0, np.zeros(self.shape))

    def initial_state(self, values: np.ndarray | Callable) -> SimState:
        """State from lattice values or from a function of ``(z1, z2)``."""
        vals = values(self.Z1, self.Z2) if callable(values) else np.asarray(values, dtype=float)
        vals = np.array(np.broadcast_to(vals, self.shape), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("initial field must be finite")
        return SimState(0, vals)

    def inject(self, state: SimState, impulses: Sequence[Impulse]) -> SimState:
        imps = tuple(((float(z[0]), float(z[1])), float(w)) for z, w in impulses)
        return SimState(state.t, state.field, state.impulses + imps)

    def convolve(self, fld: np.ndarray) -> np.ndarray:
        if self.region == "cell":
            return np.fft.irfft2(np.fft.rfft2(fld) * self._kernel_hat, s=self.shape)
        return fftconvolve(fld, self._kernel, mode="same")

    def impulse_image(self, z, w: float = 1.0) -> np.ndarray:
        """``w a(. - z)`` on the lattice (periodic images included for ``cell``)."""
        d1, d2 = self.Z1 - z[0], self.Z2 - z[1]
        if self.region == "cell":
            lam1, lam2 = self.model.domain.lambda1, self.model.domain.lambda2
            d1 = (d1 + lam1 / 2) % lam1 - lam1 / 2
            d2 = (d2 + lam2 / 2) % lam2 - lam2 / 2
        return w * raised_cosine(d1, d2, self.model.r)

    def actuation(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.model.n_u,):
            raise ValueError(f"expected {self.model.n_u} inputs, got shape {u.shape}")
        return np.tensordot(u, self.footprints, axes=1)

    def step(self, state: SimState, u) -> SimState:
        nxt = self.convolve(state.field) + self.actuation(u)
        for z, w in state.impulses:
            nxt = nxt + self.impulse_image(z, w)
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError(f"non-finite state at t={state.t + 1}")
        return SimState(state.t + 1, nxt)

    def evaluate_next(self, state: SimState, u, points, chunk: int = 64) -> np.ndarray:
        """Values of the successor state at arbitrary points, by direct quadrature.

        Unlike :meth:`step`, this does not restrict the result to lattice nodes.
        Not available for the periodic region.
        """
        if self.region == "cell":
            raise ValueError("evaluate_next is only defined for non-periodic regions")
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        u = np.asarray(u, dtype=float)
        r, w = self.model.r, self.dx1 * self.dx2
        nz = np.flatnonzero(state.field.ravel())
        z1, z2, vals = self.Z1.ravel()[nz], self.Z2.ravel()[nz], state.field.ravel()[nz]
        out = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            p = pts[s:s + chunk]
            ker = raised_cosine(p[:, 0, None] - z1[None, :], p[:, 1, None] - z2[None, :], r)
            out[s:s + chunk] = ker @ vals * w
        for z, wt in state.impulses:
            out += wt * raised_cosine(pts[:, 0] - z[0], pts[:, 1] - z[1], r)
        for l in range(self.model.n_u):
            if u[l] != 0.0:
                out += u[l] * self.model.b(l, pts[:, 0], pts[:, 1])
        return out


def _cells(x: float) -> int:
    n = round(x)
    if abs(x - n) > 1e-9:
        raise ValueError("period cell is not commensurate with the simulation lattice")
    return int(n)


@dataclass(frozen=True, eq=False)
class TrajectoryGrid:
    """States on the full lattice for ``t = 0..T`` and the inputs that produced them."""

    sim: Simulator = field(repr=False)
    states: tuple[np.ndarray, ...] = field(repr=False)
    inputs: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.inputs)

    def on_domain(self, t: int) -> np.ndarray:
        return self.sim.crop(self.states[t])

    def domain_norm(self, t: int) -> float:
        """Quadrature L2 norm of the state on the domain."""
        return float(np.linalg.norm(self.on_domain(t)) * math.sqrt(self.sim.dx1 * self.sim.dx2))


Policy = Callable[[SimState, Simulator], np.ndarray]


def rollout(sim: Simulator, T: int, inputs=None, *,
            disturbances: Mapping[int, Sequence[Impulse]] | None = None,
            initial=None, policy: Policy | None = None) -> TrajectoryGrid:
    """Advance ``T`` steps.

    ``inputs`` is a ``(T, n_u)`` array of open-loop inputs; alternatively a
    ``policy(state, sim)`` returns the input after seeing the state (point
    masses included). ``disturbances`` maps time to point masses injected
    into that time's state. ``initial`` is a lattice field or a function.
    """
    if (inputs is None) == (policy is None):
        raise ValueError("give exactly one of inputs and policy")
    if T > sim.horizon and sim.region == "plane":
        raise ValueError(f"plane lattice padded for {sim.horizon} steps, asked for {T}")
    disturbances = disturbances or {}
    if inputs is not None:
        inputs = np.asarray(inputs, dtype=float).reshape(T, sim.model.n_u)
    state = sim.zero_state() if initial is None else sim.initial_state(initial)
    states, used = [state.field], []
    for t in range(T):
        state = sim.inject(state, disturbances.get(t, ()))
        u = inputs[t] if policy is None else np.asarray(policy(state, sim), dtype=float)
        used.append(u)
        state = sim.step(state, u)
        states.append(state.field)
    return TrajectoryGrid(sim, tuple(states), np.array(used).reshape(T, sim.model.n_u))


def _response_rollout(response, model, sim, gains) -> TrajectoryGrid:
    return rollout(sim, len(response.alpha), gains,
                   disturbances={0: [(response.zt, 1.0)]})


def predicted_errors(traj: TrajectoryGrid, fields: Sequence[SpectralField],
                     model: KernelModel) -> np.ndarray:
    """Relative L2 error on the domain of ``fields[t-1]`` against ``traj`` state ``t``."""
    g1, g2 = traj.sim.omega_axes
    errs = np.empty(len(fields))
    for t in range(1, len(fields) + 1):
        true = traj.on_domain(t)
        pred = synthesize_tensor(fields[t - 1], g1, g2, model.domain)
        den = np.linalg.norm(true)
        if den == 0:
            raise DegenerateTrajectoryError(f"zero state at t={t}")
        errs[t - 1] = np.linalg.norm(pred - true) / den
    return errs


def basis_accuracy(response, model: KernelModel, grid_n: int = DEFAULT_GRID_N,
                   region: str = "plane") -> np.ndarray:
    """Relative L2 error (fraction) on the domain of each predicted state, ``t = 1..T``."""
    sim = Simulator(model, grid_n, len(response.alpha), region)
    traj = _response_rollout(response, model, sim, response.u_gains)
    return predicted_errors(traj, response.alpha, model)


def performance_gain(response, model: KernelModel, grid_n: int = DEFAULT_GRID_N,
                     region: str = "plane") -> np.ndarray:
    """``100 (1 - |x_controlled| / |x_free|)`` on the domain for ``t = 1..T``."""
    T = len(response.alpha)
    sim = Simulator(model, grid_n, T, region)
    ctl = _response_rollout(response, model, sim, response.u_gains)
    free = _response_rollout(response, model, sim, np.zeros_like(response.u_gains))
    return gains_between(ctl, free)


def gains_between(ctl: TrajectoryGrid, free: TrajectoryGrid) -> np.ndarray:
    out = np.empty(ctl.T)
    for t in range(1, ctl.T + 1):
        den = np.linalg.norm(free.on_domain(t))
        if den == 0:
            raise DegenerateTrajectoryError(f"zero uncontrolled state at t={t}")
        out[t - 1] = 100.0 * (1.0 - np.linalg.norm(ctl.on_domain(t)) / den)
    return out


def mean_performance_gain(responses: Sequence, model: KernelModel,
                          grid_n: int = DEFAULT_GRID_N) -> np.ndarray:
    """Per-step gains averaged over several single-disturbance responses."""
    if not responses:
        raise ValueError("no responses")
    return np.mean([performance_gain(r, model, grid_n) for r in responses], axis=0)


def write_table1_csv(path, errors: np.ndarray, gains: np.ndarray) -> None:
    """Fractions in ``errors`` are written as percentages."""
    lines = ["time_step,error_pct,perf_gain_pct"]
    for t, (e, g) in enumerate(zip(errors, gains), start=1):
        lines.append(f"{t},{100 * e:.17g},{g:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_table1_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_table1_csv` (errors back as percentages)."""
    rows = Path(path).read_text().splitlines()
    if rows[0] != "time_step,error_pct,perf_gain_pct":
        raise ValueError(f"{path}: unexpected header")
    data = np.array([[float(v) for v in row.split(",")] for row in rows[1:]]).reshape(-1, 3)
    return data[:, 1], data[:, 2]


def write_grid_dump(path, g1: np.ndarray, g2: np.ndarray, values: np.ndarray) -> None:
    Z1, Z2 = np.meshgrid(g1, g2, indexing="ij")
    lines = ["z1,z2,value"]
    lines += [f"{a:.17g},{b:.17g},{v:.17g}"
              for a, b, v in zip(Z1.ravel(), Z2.ravel(), np.asarray(values).ravel())]
    Path(path).write_text("\n".join(lines) + "\n")
