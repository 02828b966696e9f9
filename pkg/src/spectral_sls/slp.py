"""Per-disturbance system level parameterization in the truncated basis.

For a disturbance at ``zt`` the decision variables are the state-response
coefficients ``alpha[t]`` for ``t = 1..T`` followed by the actuator gains
``u[t]`` for ``t = 0..T-1`` (active actuators only). Each time step adds one
block of ``4(k+1)^2`` rows::

    alpha[1] - B u[0]                    = shift(a, zt)
    alpha[t] - C alpha[t-1] - B u[t-1]   = 0              (t >= 2)

where ``C`` is the mode-diagonal convolution with ``a`` and ``B`` stacks the
actuator footprint coefficients. The delta at ``t = 0`` is fixed data, so the
cost only covers ``alpha[1..T]`` and ``u[0..T-1]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import KernelModel, Locality, SynthesisConfig
from .qpsolve import EqConstrainedQP
from .spectral import SpectralField, conv_blocks, n_coeffs, shift_coefficients

__all__ = [
    "SLPProblem",
    "EmptyActuatorSetWarning",
    "locality_mask",
    "conv_operator",
    "assemble",
    "cost_of",
]


class EmptyActuatorSetWarning(UserWarning):
    """No actuator may respond to this disturbance; only the free rollout is feasible."""


@dataclass(frozen=True, eq=False)
class SLPProblem:
    zt: tuple[float, float]
    T: int
    k: int
    n_u: int
    active: tuple[int, ...]
    A: sp.csr_matrix
    b: np.ndarray
    cost_diag: np.ndarray
    a_shift: SpectralField
    conv: sp.csr_matrix

    @property
    def n_state(self) -> int:
        return n_coeffs(self.k)

    @property
    def n_vars(self) -> int:
        return self.T * (self.n_state + len(self.active))

    def qp(self) -> EqConstrainedQP:
        return EqConstrainedQP(self.cost_diag, self.A, self.b)

    def unpack(self, x: np.ndarray) -> tuple[list[SpectralField], np.ndarray]:
        """Split a solution vector into state fields and full-width gains ``(T, n_u)``.

        Masked actuators come back as exact zeros.
        """
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise ValueError(f"expected {self.n_vars} entries, got {x.shape}")
        nc = self.n_state
        alpha = [SpectralField(self.k, x[t * nc:(t + 1) * nc]) for t in range(self.T)]
        gains = np.zeros((self.T, self.n_u))
        gains[:, list(self.active)] = x[self.T * nc:].reshape(self.T, len(self.active))
        return alpha, gains

    def pack(self, alpha, gains) -> np.ndarray:
        gains = np.asarray(gains, dtype=float).reshape(self.T, self.n_u)
        parts = [np.asarray(f.flat if isinstance(f, SpectralField) else f).ravel()
                 for f in alpha]
        parts.append(gains[:, list(self.active)].ravel())
        return np.concatenate(parts)

    def residual(self, x: np.ndarray) -> float:
        """``max |A x - b|``."""
        return float(np.max(np.abs(self.A @ x - self.b), initial=0.0))

    def uncontrolled_witness(self) -> np.ndarray:
        """Feasible point with all gains zero: the free propagation of ``shift(a, zt)``."""
        states = [self.a_shift.flat.copy()]
        for _ in range(1, self.T):
            states.append(self.conv @ states[-1])
        return self.pack(states, np.zeros((self.T, self.n_u)))


def locality_mask(model: KernelModel, zt, locality: Locality | None) -> tuple[int, ...]:
    """Indices of actuators within the locality radius of ``zt``, ascending."""
    if locality is None or np.isinf(locality.radius):
        return tuple(range(model.n_u))
    d = model.actuators - np.asarray(zt, dtype=float)
    dist = np.abs(d).sum(axis=1) if locality.norm == 1 else np.hypot(d[:, 0], d[:, 1])
    return tuple(int(l) for l in np.flatnonzero(dist <= locality.radius))


def conv_operator(model: KernelModel) -> sp.csr_matrix:
    """Block-diagonal sparse matrix applying the spectral convolution with ``a``."""
    blk = conv_blocks(model.a_coeffs, model.domain)
    nb = blk.shape[0] * blk.shape[1]
    return sp.bsr_matrix((blk.reshape(nb, 4, 4), np.arange(nb), np.arange(nb + 1)),
                         shape=(4 * nb, 4 * nb)).tocsr()


def assemble(model: KernelModel, cfg: SynthesisConfig, zt,
             conv: sp.csr_matrix | None = None) -> SLPProblem:
    """Constraint rows and cost weights for a disturbance at ``zt``.

    ``conv`` may be passed in to reuse one convolution operator across
    many disturbances.
    """
    zt = (float(zt[0]), float(zt[1]))
    if not model.domain.contains(zt):
        raise ValueError(f"disturbance {zt} outside the domain")
    if cfg.k != model.k:
        raise ValueError(f"config k={cfg.k} but model k={model.k}")
    active = locality_mask(model, zt, cfg.locality)
    if not active:
        warnings.warn(f"no actuator within the locality radius of {zt}",
                      EmptyActuatorSetWarning, stacklevel=2)
    T, nc, na = cfg.T, n_coeffs(model.k), len(active)
    if conv is None:
        conv = conv_operator(model)
    bmat = sp.csr_matrix(model.b_matrix()[:, list(active)])
    eye = sp.identity(nc, format="csr")

    state_blocks = [[None] * T for _ in range(T)]
    input_blocks = [[None] * T for _ in range(T)]
    for t in range(T):
        state_blocks[t][t] = eye
        if t > 0:
            state_blocks[t][t - 1] = -conv
        input_blocks[t][t] = -bmat if na else sp.csr_matrix((nc, 0))
    S = sp.bmat(state_blocks, format="csr")
    if na:
        A = sp.hstack([S, sp.bmat(input_blocks, format="csr")], format="csr")
    else:
        A = S
    A.eliminate_zeros()

    a_shift = shift_coefficients(model.a_coeffs, zt, model.domain)
    b = np.zeros(T * nc)
    b[:nc] = a_shift.flat
    cost = np.concatenate([np.full(T * nc, cfg.Q), np.full(T * na, cfg.R)])
    return SLPProblem(zt, T, model.k, model.n_u, active, A, b, cost, a_shift, conv)


def cost_of(problem: SLPProblem, x) -> float:
    """``sum_j cost_diag[j] x[j]^2``."""
    x = np.asarray(x, dtype=float)
    if x.shape != problem.cost_diag.shape:
        raise ValueError(f"expected {problem.cost_diag.size} entries, got {x.shape}")
    return float(np.dot(problem.cost_diag, x * x))
