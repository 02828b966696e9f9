"""Truncated real Fourier basis on a 2D period cell.

Basis functions are indexed by ``(m, n, i)`` with ``0 <= m, n <= k`` and
``i in {1, 2, 3, 4}``::

    phi_mn1 = sin(w1 m z1) sin(w2 n z2)
    phi_mn2 = cos(w1 m z1) sin(w2 n z2)
    phi_mn3 = sin(w1 m z1) cos(w2 n z2)
    phi_mn4 = cos(w1 m z1) cos(w2 n z2)

with ``w1 = 2 pi / lambda1`` and ``w2 = 2 pi / lambda2``. Coefficient arrays
have shape ``(k+1, k+1, 4)``; flattening in C order puts ``i`` fastest, then
``n``, then ``m``.

Basis functions containing ``sin(0)`` vanish identically. Their coefficients
are carried (so the layout stays rectangular) but are always zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "Domain2D",
    "SpectralField",
    "kappa",
    "kappa_grid",
    "n_coeffs",
    "flat_index",
    "basis_indices",
    "live_mask",
    "eval_basis",
    "basis_matrix",
    "project",
    "shift_matrices",
    "shift_coefficients",
    "conv_matrix",
    "conv_scale",
    "conv_blocks",
    "conv_apply",
    "synthesize_grid",
    "synthesize_tensor",
    "l2_norm_sq",
    "write_coeff_csv",
    "read_coeff_csv",
]

# Pins the Fourier coefficients of the default raised-cosine kernel to < 1e-9
# under doubling (refinement study in tests/test_spectral.py).
DEFAULT_QUAD_N = 2048


@dataclass(frozen=True)
class Domain2D:
    """Rectangular state domain together with the basis periods.

    The period cell is ``[-lambda1/2, lambda1/2] x [-lambda2/2, lambda2/2]``.
    Each period must be at least twice the domain width so that circular
    convolution on the cell agrees with free-space convolution of functions
    supported on the domain.
    """

    z1_min: float
    z1_max: float
    z2_min: float
    z2_max: float
    lambda1: float
    lambda2: float
    quad_n: int = DEFAULT_QUAD_N

    def __post_init__(self):
        if not (self.z1_max > self.z1_min and self.z2_max > self.z2_min):
            raise ValueError("domain extents must be increasing")
        if self.lambda1 < 2 * (self.z1_max - self.z1_min) - 1e-12:
            raise ValueError("lambda1 must be at least twice the z1 width")
        if self.lambda2 < 2 * (self.z2_max - self.z2_min) - 1e-12:
            raise ValueError("lambda2 must be at least twice the z2 width")
        half1, half2 = self.lambda1 / 2, self.lambda2 / 2
        if (self.z1_min < -half1 - 1e-12 or self.z1_max > half1 + 1e-12
                or self.z2_min < -half2 - 1e-12 or self.z2_max > half2 + 1e-12):
            raise ValueError("domain must lie inside the period cell")
        if int(self.quad_n) < 1:
            raise ValueError("quad_n must be positive")

    @classmethod
    def square(cls, half_width: float, quad_n: int = DEFAULT_QUAD_N) -> "Domain2D":
        """``[-h, h]^2`` with the smallest admissible periods ``4h``."""
        h = float(half_width)
        return cls(-h, h, -h, h, 4 * h, 4 * h, quad_n)

    @property
    def width1(self) -> float:
        return self.z1_max - self.z1_min

    @property
    def width2(self) -> float:
        return self.z2_max - self.z2_min

    def check_k(self, k: int) -> None:
        if self.quad_n < 4 * (k + 1):
            raise ValueError(f"quad_n={self.quad_n} too small for k={k}")

    def contains(self, z, tol: float = 1e-12) -> bool:
        z1, z2 = float(z[0]), float(z[1])
        return (self.z1_min - tol <= z1 <= self.z1_max + tol
                and self.z2_min - tol <= z2 <= self.z2_max + tol)

    def cell_nodes(self, quad_n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Midpoint-rule nodes on the period cell, one array per axis."""
        n = int(quad_n or self.quad_n)
        j = np.arange(n) + 0.5
        return (j / n - 0.5) * self.lambda1, (j / n - 0.5) * self.lambda2

    def with_quad_n(self, quad_n: int) -> "Domain2D":
        return Domain2D(self.z1_min, self.z1_max, self.z2_min, self.z2_max,
                        self.lambda1, self.lambda2, int(quad_n))


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Coefficients of a function in the truncated basis."""

    k: int
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.size != n_coeffs(self.k):
            raise ValueError(f"expected {n_coeffs(self.k)} coefficients, got {c.size}")
        c = c.reshape(self.k + 1, self.k + 1, 4)
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, k: int) -> "SpectralField":
        return cls(k, np.zeros((k + 1, k + 1, 4)))

    @property
    def flat(self) -> np.ndarray:
        return self.coeffs.reshape(-1)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _same_k(self, other)
        return SpectralField(self.k, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _same_k(self, other)
        return SpectralField(self.k, self.coeffs - other.coeffs)

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.k, -self.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.k, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return (isinstance(other, SpectralField) and self.k == other.k
                and np.array_equal(self.coeffs, other.coeffs))

    def allclose(self, other: "SpectralField", atol: float) -> bool:
        _same_k(self, other)
        return bool(np.max(np.abs(self.coeffs - other.coeffs)) <= atol)


def _same_k(f: SpectralField, g: SpectralField) -> None:
    if f.k != g.k:
        raise ValueError(f"truncation mismatch: {f.k} vs {g.k}")


def n_coeffs(k: int) -> int:
    return 4 * (k + 1) ** 2


def kappa(m: int, n: int) -> int:
    if m == 0 and n == 0:
        return 1
    if m == 0 or n == 0:
        return 2
    return 4


def kappa_grid(k: int) -> np.ndarray:
    m = np.arange(k + 1)
    zero = (m == 0).astype(int)
    return 4 // (2 ** (zero[:, None] + zero[None, :]))


def flat_index(m: int, n: int, i: int, k: int) -> int:
    """Position of ``(m, n, i)`` (``i`` 1-based) in the flattened layout."""
    return (m * (k + 1) + n) * 4 + (i - 1)


def basis_indices(k: int) -> Iterator[tuple[int, int, int]]:
    for m in range(k + 1):
        for n in range(k + 1):
            for i in range(1, 5):
                yield m, n, i


def live_mask(k: int) -> np.ndarray:
    """Boolean ``(k+1, k+1, 4)`` mask of basis functions that are not identically 0."""
    mask = np.ones((k + 1, k + 1, 4), dtype=bool)
    mask[0, :, 0] = mask[0, :, 2] = False  # sin(0 * z1)
    mask[:, 0, 0] = mask[:, 0, 1] = False  # sin(0 * z2)
    return mask


def _axis(z: np.ndarray, k: int, lam: float) -> tuple[np.ndarray, np.ndarray]:
    arg = np.multiply.outer(np.asarray(z, dtype=float), 2 * np.pi * np.arange(k + 1) / lam)
    return np.cos(arg), np.sin(arg)


def eval_basis(idx: tuple[int, int, int], z, dom: Domain2D) -> float:
    m, n, i = idx
    a = 2 * math.pi * m * z[0] / dom.lambda1
    b = 2 * math.pi * n * z[1] / dom.lambda2
    f1 = math.sin(a) if i in (1, 3) else math.cos(a)
    f2 = math.sin(b) if i in (1, 2) else math.cos(b)
    return f1 * f2


def _phi_all(z1, z2, k: int, dom: Domain2D) -> np.ndarray:
    """All basis values at points; shape ``z1.shape + (k+1, k+1, 4)``."""
    c1, s1 = _axis(z1, k, dom.lambda1)
    c2, s2 = _axis(z2, k, dom.lambda2)
    e1, e2 = (Ellipsis, slice(None), None), (Ellipsis, None, slice(None))
    return np.stack([s1[e1] * s2[e2], c1[e1] * s2[e2],
                     s1[e1] * c2[e2], c1[e1] * c2[e2]], axis=-1)


def basis_matrix(points, k: int, dom: Domain2D) -> np.ndarray:
    """Matrix ``P`` with ``P[p, j] = phi_j(points[p])`` in flat layout."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return _phi_all(pts[:, 0], pts[:, 1], k, dom).reshape(len(pts), -1)


def project(f: Callable[[np.ndarray, np.ndarray], np.ndarray], k: int,
            dom: Domain2D, quad_n: int | None = None) -> SpectralField:
    """Fourier coefficients of ``f`` by midpoint quadrature on the period cell.

    ``f`` is called once with two broadcastable coordinate arrays and must
    return the sampled values.
    """
    n = int(quad_n or dom.quad_n)
    if n < 4 * (k + 1):
        raise ValueError(f"quad_n={n} too small for k={k}")
    g1, g2 = dom.cell_nodes(n)
    vals = np.asarray(f(g1[:, None], g2[None, :]), dtype=float)
    vals = np.broadcast_to(vals, (n, n))
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite samples while projecting")
    return project_samples(vals, k, dom)


def project_samples(vals: np.ndarray, k: int, dom: Domain2D) -> SpectralField:
    """Coefficients from samples on the ``cell_nodes`` grid of matching size."""
    n1, n2 = vals.shape
    g1, _ = dom.cell_nodes(n1)
    _, g2 = dom.cell_nodes(n2)
    c1, s1 = _axis(g1, k, dom.lambda1)
    c2, s2 = _axis(g2, k, dom.lambda2)
    t_c, t_s = vals.T @ c1, vals.T @ s1  # (n2, k+1) each, z1 integrated
    out = np.stack([s2.T @ t_s, s2.T @ t_c, c2.T @ t_s, c2.T @ t_c], axis=-1)
    # out[n, m, i] -> (m, n, i)
    out = out.transpose(1, 0, 2)
    weight = (dom.lambda1 / n1) * (dom.lambda2 / n2)
    scale = kappa_grid(k)[:, :, None] / (dom.lambda1 * dom.lambda2)
    coeffs = out * weight * scale
    coeffs[~live_mask(k)] = 0.0
    return SpectralField(k, coeffs)


def shift_matrices(k: int, zt, dom: Domain2D) -> np.ndarray:
    """Per-mode 4x4 matrices ``S`` with ``shifted[m, n] = S[m, n] @ coeffs[m, n]``.

    ``shifted`` are the coefficients of ``z -> f(z - zt)``.
    """
    p = _phi_all(np.float64(zt[0]), np.float64(zt[1]), k, dom)
    p1, p2, p3, p4 = (p[..., j] for j in range(4))
    return np.stack([
        np.stack([p4, p3, p2, p1], axis=-1),
        np.stack([-p3, p4, -p1, p2], axis=-1),
        np.stack([-p2, -p1, p4, p3], axis=-1),
        np.stack([p1, -p2, -p3, p4], axis=-1),
    ], axis=-2)


def shift_coefficients(fld: SpectralField, zt, dom: Domain2D) -> SpectralField:
    s = shift_matrices(fld.k, zt, dom)
    return SpectralField(fld.k, np.einsum("mnij,mnj->mni", s, fld.coeffs))


def conv_matrix(a_field: SpectralField, m: int, n: int) -> np.ndarray:
    """Unscaled 4x4 mixing matrix of the convolution at mode ``(m, n)``.

    The full per-mode action is ``conv_scale(m, n, dom) * conv_matrix(...)``.
    """
    a1, a2, a3, a4 = a_field.coeffs[m, n]
    return np.array([
        [a4, a3, a2, a1],
        [-a3, a4, -a1, a2],
        [-a2, -a1, a4, a3],
        [a1, -a2, -a3, a4],
    ])


def conv_scale(m: int, n: int, dom: Domain2D) -> float:
    """Normalisation of the per-mode convolution, ``lambda1 lambda2 / kappa``."""
    return dom.lambda1 * dom.lambda2 / kappa(m, n)


def conv_blocks(a_field: SpectralField, dom: Domain2D) -> np.ndarray:
    """Scaled convolution blocks for every mode, shape ``(k+1, k+1, 4, 4)``."""
    a1, a2, a3, a4 = (a_field.coeffs[..., j] for j in range(4))
    blk = np.stack([
        np.stack([a4, a3, a2, a1], axis=-1),
        np.stack([-a3, a4, -a1, a2], axis=-1),
        np.stack([-a2, -a1, a4, a3], axis=-1),
        np.stack([a1, -a2, -a3, a4], axis=-1),
    ], axis=-2)
    scale = dom.lambda1 * dom.lambda2 / kappa_grid(a_field.k)
    blk = blk * scale[:, :, None, None]
    # rows of identically-zero basis functions carry no information
    blk[~live_mask(a_field.k)] = 0.0
    return blk


def conv_apply(a_field: SpectralField, x_field: SpectralField, dom: Domain2D) -> SpectralField:
    """Coefficients of the periodic convolution ``z -> int a(z - z') x(z') dz'``."""
    _same_k(a_field, x_field)
    blk = conv_blocks(a_field, dom)
    return SpectralField(a_field.k, np.einsum("mnij,mnj->mni", blk, x_field.coeffs))


def synthesize_grid(fld: SpectralField, grid, dom: Domain2D) -> np.ndarray:
    """Evaluate ``sum alpha_j phi_j`` at an array of points ``(..., 2)``."""
    pts = np.asarray(grid, dtype=float)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 2)
    out = np.empty(len(pts))
    chunk = 4096
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        out[s:s + chunk] = basis_matrix(p, fld.k, dom) @ fld.flat
    return out.reshape(shape)


def synthesize_tensor(fld: SpectralField, g1: np.ndarray, g2: np.ndarray,
                      dom: Domain2D) -> np.ndarray:
    """Evaluate on the tensor grid ``g1 x g2``; result has shape ``(len(g1), len(g2))``."""
    c1, s1 = _axis(g1, fld.k, dom.lambda1)
    c2, s2 = _axis(g2, fld.k, dom.lambda2)
    a = fld.coeffs
    return (s1 @ a[..., 0] @ s2.T + c1 @ a[..., 1] @ s2.T
            + s1 @ a[..., 2] @ c2.T + c1 @ a[..., 3] @ c2.T)


def l2_norm_sq(fld: SpectralField, dom: Domain2D) -> float:
    """Squared L2 norm over the period cell (Parseval)."""
    w = dom.lambda1 * dom.lambda2 / kappa_grid(fld.k)
    return float(np.sum(w[:, :, None] * fld.coeffs ** 2))


def write_coeff_csv(path, fld: SpectralField, dom: Domain2D, role: str) -> None:
    lines = ["k,lambda1,lambda2,role",
             f"{fld.k},{dom.lambda1:.17g},{dom.lambda2:.17g},{role}",
             "m,n,i,value"]
    for m, n, i in basis_indices(fld.k):
        lines.append(f"{m},{n},{i},{fld.coeffs[m, n, i - 1]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_coeff_csv(path) -> tuple[SpectralField, dict]:
    rows = Path(path).read_text().splitlines()
    if rows[0] != "k,lambda1,lambda2,role" or rows[2] != "m,n,i,value":
        raise ValueError(f"{path}: not a coefficient file")
    k_s, l1, l2, role = rows[1].split(",", 3)
    k = int(k_s)
    coeffs = np.zeros((k + 1, k + 1, 4))
    for row in rows[3:]:
        m, n, i, v = row.split(",")
        coeffs[int(m), int(n), int(i) - 1] = float(v)
    meta = {"k": k, "lambda1": float(l1), "lambda2": float(l2), "role": role}
    return SpectralField(k, coeffs), meta
