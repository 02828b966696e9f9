"""Raised-cosine scattering kernel, actuators and synthesis settings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import (
    Domain2D,
    SpectralField,
    basis_matrix,
    project,
    shift_coefficients,
)

__all__ = [
    "raised_cosine",
    "KernelModel",
    "Locality",
    "SynthesisConfig",
    "actuator_grid",
    "build_model",
    "eval_actuation",
]


def raised_cosine(z1, z2, r: float):
    """``1/2 + 1/2 cos(pi |z| / r)`` inside radius ``r``, zero outside.

    Accepts scalars or broadcastable arrays.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    rho = np.hypot(z1, z2)
    out = np.where(rho <= r, 0.5 + 0.5 * np.cos(np.pi * np.minimum(rho, r) / r), 0.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class KernelModel:
    """Dynamics kernel ``a`` and actuator footprints ``b(l, .) = -a(. - zhat_l)``."""

    r: float
    domain: Domain2D
    a_coeffs: SpectralField
    actuators: np.ndarray = field(repr=False)
    b_coeffs: tuple[SpectralField, ...] = field(repr=False)

    def __post_init__(self):
        act = np.array(self.actuators, dtype=float).reshape(-1, 2)
        act.setflags(write=False)
        object.__setattr__(self, "actuators", act)
        if len(self.b_coeffs) != len(act):
            raise ValueError("one b field per actuator")

    @property
    def k(self) -> int:
        return self.a_coeffs.k

    @property
    def n_u(self) -> int:
        return len(self.actuators)

    def a(self, z1, z2):
        return raised_cosine(z1, z2, self.r)

    def b(self, l: int, z1, z2):
        p = self.actuators[l]
        return -raised_cosine(np.subtract(z1, p[0]), np.subtract(z2, p[1]), self.r)

    def b_matrix(self) -> np.ndarray:
        """``(4(k+1)^2, n_u)`` matrix whose columns are the b coefficient vectors."""
        return np.stack([bf.flat for bf in self.b_coeffs], axis=1)


@dataclass(frozen=True)
class Locality:
    """Actuators respond only to disturbances within ``radius`` in the ``norm``-norm."""

    norm: int = 1
    radius: float = math.inf

    def __post_init__(self):
        if self.norm not in (1, 2):
            raise ValueError("locality norm must be 1 or 2")
        if self.radius < 0:
            raise ValueError("locality radius must be nonnegative")


@dataclass(frozen=True)
class SynthesisConfig:
    T: int = 5
    k: int = 12
    Q: float = 1.0
    R: float = 1.0
    domain: Domain2D = field(default_factory=lambda: Domain2D.square(2.0))
    locality: Locality | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")
        if not self.Q > 0:
            raise ValueError("Q must be positive")
        if self.R < 0:
            raise ValueError("R must be nonnegative")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        self.domain.check_k(self.k)


def actuator_grid(n_u: int, domain: Domain2D) -> np.ndarray:
    """Uniform ``sqrt(n_u) x sqrt(n_u)`` grid with half-cell margins."""
    side = math.isqrt(n_u)
    if side * side != n_u or n_u < 1:
        raise ValueError(f"n_u={n_u} is not a perfect square; pass explicit actuators")
    c1 = domain.z1_min + (np.arange(side) + 0.5) * domain.width1 / side
    c2 = domain.z2_min + (np.arange(side) + 0.5) * domain.width2 / side
    g1, g2 = np.meshgrid(c1, c2, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


def build_model(r: float, n_u: int, domain: Domain2D, k: int,
                actuators=None) -> KernelModel:
    """Project the kernel and derive every actuator footprint by an exact shift."""
    if r > min(domain.width1, domain.width2) / 2:
        raise ValueError(f"r={r} exceeds half the domain width")
    if actuators is None:
        actuators = actuator_grid(n_u, domain)
    actuators = np.asarray(actuators, dtype=float).reshape(-1, 2)
    for p in actuators:
        if not domain.contains(p):
            raise ValueError(f"actuator {tuple(p)} outside the domain")
    a_coeffs = project(lambda z1, z2: raised_cosine(z1, z2, r), k, domain)
    b_coeffs = tuple(-shift_coefficients(a_coeffs, p, domain) for p in actuators)
    return KernelModel(float(r), domain, a_coeffs, actuators, b_coeffs)


def eval_actuation(model: KernelModel, gains, z) -> np.ndarray:
    """``sum_l b(l, z) gains_l`` from the projected footprints."""
    gains = np.asarray(gains, dtype=float)
    if gains.shape != (model.n_u,) or not np.all(np.isfinite(gains)):
        raise ValueError("gains must be a finite vector of length n_u")
    pts = np.asarray(z, dtype=float)
    shape = pts.shape[:-1]
    vals = basis_matrix(pts.reshape(-1, 2), model.k, model.domain) @ (model.b_matrix() @ gains)
    return vals.reshape(shape)
