"""Homogenized stiffness of the equilateral rank-3 laminate.

Layer 3 is the base layer.  The three layer normals sit at
``theta3 + 2pi/3``, ``theta3 + pi/3`` and ``theta3`` for layers 1, 2, 3.

Matrices are returned in engineering Voigt order ``(11, 22, 12)``::

    [[S1111, S1122, S1112],
     [S1122, S2222, S2212],
     [S1112, S2212, S1212]]

which maps engineering strains ``(e11, e22, 2*e12)`` to stresses.  Internally
the laminate formula is evaluated in the rotated "K" basis
``((11-22)/sqrt2, sqrt2*12, (11+22)/sqrt2)``, an orthonormal change of the
Mandel basis, so matrix inversion there equals tensor inversion.

All functions are vectorized: width arrays have shape ``(..., 3)`` and angle
arrays shape ``(...)`` (or ``(..., 3)`` for free orientations).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# equilateral offsets of the layer normals relative to theta3, layer order 1,2,3
LAYER_OFFSETS = np.array([2.0 * np.pi / 3.0, np.pi / 3.0, 0.0])
THETA_BOUND = 4.0 * np.pi
RHO_EPS = 1e-12


class SingularLaminateError(ArithmeticError):
    """The bracketed inverse of the laminate formula is numerically singular."""


@dataclass(frozen=True)
class MaterialConstants:
    e_plus: float = 1.0
    e_minus: float | None = None
    v0: float = 0.3

    def __post_init__(self):
        if self.e_minus is None:
            object.__setattr__(self, "e_minus", 1e-6 * self.e_plus)
        if not 0.0 < self.v0 < 0.5:
            raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {self.v0}")
        if self.e_plus <= 0 or self.e_minus < 0 or self.e_minus >= self.e_plus:
            raise ValueError("need 0 <= e_minus < e_plus")


@dataclass(frozen=True)
class LaminateSpec:
    """Widths and layer-3 normal angle of a single cell."""

    alpha: tuple[float, float, float]
    theta3: float = 0.0
    l_min: float = field(default=0.0, compare=False)
    l_max: float = field(default=1.0, compare=False)

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.shape != (3,):
            raise ValueError("alpha must have three entries")
        if np.any(a < self.l_min) or np.any(a > self.l_max):
            raise ValueError(f"widths {a} outside [{self.l_min}, {self.l_max}]")
        if abs(self.theta3) > THETA_BOUND:
            raise ValueError("theta3 outside [-4pi, 4pi]")
        object.__setattr__(self, "alpha", tuple(float(x) for x in a))

    @property
    def thetas(self) -> np.ndarray:
        """Normal angles of layers 1, 2, 3."""
        return self.theta3 + LAYER_OFFSETS

    @property
    def normals(self) -> np.ndarray:
        t = self.thetas
        return np.stack([np.cos(t), np.sin(t)], axis=-1)

    @property
    def tangents(self) -> np.ndarray:
        t = self.thetas
        return np.stack([-np.sin(t), np.cos(t)], axis=-1)


def layer_thetas(theta3) -> np.ndarray:
    """Expand layer-3 normal angles to the three equilateral normals."""
    return np.asarray(theta3, dtype=float)[..., None] + LAYER_OFFSETS


def layer_densities(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    return np.stack([(1 - a3) * (1 - a2) * a1, (1 - a3) * a2, a3], axis=-1)


def volume_fraction(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    return 1.0 - np.prod(1.0 - a, axis=-1)


def layer_density_jacobian(alpha) -> np.ndarray:
    """``J[..., n, k] = d rho_n / d alpha_k``."""
    a = np.asarray(alpha, dtype=float)
    a1, a2, a3 = a[..., 0], a[..., 1], a[..., 2]
    J = np.zeros(a.shape[:-1] + (3, 3))
    J[..., 0, 0] = (1 - a3) * (1 - a2)
    J[..., 0, 1] = -(1 - a3) * a1
    J[..., 0, 2] = -(1 - a2) * a1
    J[..., 1, 1] = 1 - a3
    J[..., 1, 2] = -a2
    J[..., 2, 2] = 1.0
    return J


def volume_fraction_gradient(alpha) -> np.ndarray:
    return layer_density_jacobian(alpha).sum(axis=-2)


def stiffness_fractions(alpha) -> np.ndarray:
    """Relative layer contributions ``P_n = rho_n / rho`` (1/3 each when empty)."""
    rn = layer_densities(alpha)
    rho = rn.sum(axis=-1, keepdims=True)
    safe = np.where(rho < RHO_EPS, 1.0, rho)
    return np.where(rho < RHO_EPS, 1.0 / 3.0, rn / safe)


def trig_moments(p, theta3=None, thetas=None) -> np.ndarray:
    """The four moments ``(m1, m2, m3, m4)`` of the layer angles weighted by ``p``."""
    p = np.asarray(p, dtype=float)
    if np.any(p < -1e-15):
        raise ValueError("layer contributions must be non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("layer contributions must sum to one")
    if thetas is None:
        thetas = layer_thetas(theta3)
    th = np.asarray(thetas, dtype=float)
    return np.stack(
        [
            np.sum(p * np.cos(2 * th), axis=-1),
            np.sum(p * np.sin(2 * th), axis=-1),
            np.sum(p * np.cos(4 * th), axis=-1),
            np.sum(p * np.sin(4 * th), axis=-1),
        ],
        axis=-1,
    )


def moment_matrix(m, v0: float) -> np.ndarray:
    """Structure matrix in the K basis from the four moments."""
    m = np.asarray(m, dtype=float)
    m1, m2, m3, m4 = (m[..., i] for i in range(4))
    c = 4.0 * (1.0 - v0)
    M = np.empty(m.shape[:-1] + (3, 3))
    M[..., 0, 0] = (3 - v0 - (1 + v0) * m3) / c
    M[..., 1, 1] = (3 - v0 + (1 + v0) * m3) / c
    M[..., 2, 2] = 0.5
    M[..., 0, 1] = M[..., 1, 0] = -(1 + v0) * m4 / c
    M[..., 0, 2] = M[..., 2, 0] = 0.5 * m1
    M[..., 1, 2] = M[..., 2, 1] = 0.5 * m2
    return M


def _layer_matrix_dtheta(theta, v0: float) -> np.ndarray:
    """d/dtheta of the single-layer structure matrix."""
    th = np.asarray(theta, dtype=float)
    c = 4.0 * (1.0 - v0)
    s4, c4 = np.sin(4 * th), np.cos(4 * th)
    D = np.zeros(th.shape + (3, 3))
    D[..., 0, 0] = 4 * (1 + v0) * s4 / c
    D[..., 1, 1] = -4 * (1 + v0) * s4 / c
    D[..., 0, 1] = D[..., 1, 0] = -4 * (1 + v0) * c4 / c
    D[..., 0, 2] = D[..., 2, 0] = -np.sin(2 * th)
    D[..., 1, 2] = D[..., 2, 1] = np.cos(2 * th)
    return D


def _layer_matrix(theta, v0: float) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    m = np.stack([np.cos(2 * th), np.sin(2 * th), np.cos(4 * th), np.sin(4 * th)], axis=-1)
    return moment_matrix(m, v0)


def isotropic_k(e: float, v0: float) -> np.ndarray:
    """Plane-stress isotropic stiffness in the K basis."""
    return np.diag([e / (1 + v0), e / (1 + v0), e / (1 - v0)])


def isotropic_voigt(e, v0: float) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    base = np.array([[1.0, v0, 0.0], [v0, 1.0, 0.0], [0.0, 0.0, (1.0 - v0) / 2.0]])
    return (e / (1.0 - v0**2))[..., None, None] * base


def tensor_to_k(t) -> np.ndarray:
    """Fourth-order components (Voigt-arranged, see module doc) -> K basis."""
    t = np.asarray(t, dtype=float)
    a11, a22, a12 = t[..., 0, 0], t[..., 1, 1], t[..., 0, 1]
    a1112, a2212, a1212 = t[..., 0, 2], t[..., 1, 2], t[..., 2, 2]
    k = np.empty(t.shape)
    k[..., 0, 0] = 0.5 * (a11 + a22) - a12
    k[..., 1, 1] = 2.0 * a1212
    k[..., 2, 2] = 0.5 * (a11 + a22) + a12
    k[..., 0, 1] = k[..., 1, 0] = a1112 - a2212
    k[..., 0, 2] = k[..., 2, 0] = 0.5 * (a11 - a22)
    k[..., 1, 2] = k[..., 2, 1] = a1112 + a2212
    return k


def k_to_tensor(k) -> np.ndarray:
    """K basis -> fourth-order components in Voigt arrangement."""
    k = np.asarray(k, dtype=float)
    s11, s22, s33 = k[..., 0, 0], k[..., 1, 1], k[..., 2, 2]
    s12, s13, s23 = k[..., 0, 1], k[..., 0, 2], k[..., 1, 2]
    t = np.empty(k.shape)
    t[..., 0, 0] = 0.5 * (s11 + s33) + s13
    t[..., 1, 1] = 0.5 * (s11 + s33) - s13
    t[..., 0, 1] = t[..., 1, 0] = -0.5 * (s11 - s33)
    t[..., 0, 2] = t[..., 2, 0] = 0.5 * (s12 + s23)
    t[..., 1, 2] = t[..., 2, 1] = -0.5 * (s12 - s23)
    t[..., 2, 2] = 0.5 * s22
    return t


def tensor_matrix_roundtrip(t) -> np.ndarray:
    return k_to_tensor(tensor_to_k(t))


def _prepare(alpha, theta, free: bool):
    alpha = np.asarray(alpha, dtype=float)
    theta = np.asarray(theta, dtype=float)
    thetas = theta if free else layer_thetas(theta)
    if thetas.shape != alpha.shape:
        raise ValueError(f"shape mismatch: alpha {alpha.shape}, angles {thetas.shape}")
    return alpha, thetas


def _bracket(alpha, thetas, mat: MaterialConstants):
    v0 = mat.v0
    rho = volume_fraction(alpha)
    p = stiffness_fractions(alpha)
    M = moment_matrix(trig_moments(p, thetas=thetas), v0)
    dk = isotropic_k(mat.e_plus - mat.e_minus, v0)
    c = (1.0 - v0**2) / mat.e_plus
    A = np.linalg.inv(dk) - c * rho[..., None, None] * M
    cond = np.linalg.cond(A)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e14):
        raise SingularLaminateError(f"laminate bracket singular (cond={np.max(cond):.3e})")
    if log.isEnabledFor(logging.DEBUG):
        log.debug("laminate bracket condition number max %.3e", float(np.max(cond)))
    return rho, A, c


def elasticity_matrix(alpha, theta, mat: MaterialConstants = MaterialConstants(), free: bool = False):
    """Voigt stiffness of rank-3 cells.

    ``theta`` holds layer-3 normal angles, or with ``free=True`` all three
    normal angles (shape ``(..., 3)``), the unrestricted laminate used only as
    a reference.
    """
    alpha, thetas = _prepare(alpha, theta, free)
    rho, A, _ = _bracket(alpha, thetas, mat)
    Sk = isotropic_k(mat.e_plus, mat.v0) - (1.0 - rho)[..., None, None] * np.linalg.inv(A)
    return k_to_tensor(Sk)


def elasticity_sensitivities(alpha, theta, mat: MaterialConstants = MaterialConstants(), free: bool = False):
    """Stiffness and its analytic derivatives.

    Returns ``(S, dS_dalpha, dS_dtheta)`` with ``dS_dalpha[..., k, :, :]`` for
    width ``k``.  ``dS_dtheta`` has shape ``(..., 3, 3)`` (derivative w.r.t.
    theta3) in the restricted case and ``(..., 3, 3, 3)`` when ``free``.
    """
    alpha, thetas = _prepare(alpha, theta, free)
    v0 = mat.v0
    rho, A, c = _bracket(alpha, thetas, mat)
    Ainv = np.linalg.inv(A)
    Sk = isotropic_k(mat.e_plus, v0) - (1.0 - rho)[..., None, None] * Ainv

    # rho*M == sum_n rho_n * Lambda(theta_n), linear in the layer densities
    rn = layer_densities(alpha)
    lam = _layer_matrix(thetas, v0)  # (..., 3 layers, 3, 3)
    dlam = _layer_matrix_dtheta(thetas, v0)
    J = layer_density_jacobian(alpha)  # (..., n, k)
    drho = J.sum(axis=-2)  # (..., k)

    def dS_from(drho_, d_rhoM):
        dA = -c * d_rhoM
        return drho_[..., None, None] * Ainv + (1.0 - rho)[..., None, None] * (Ainv @ dA @ Ainv)

    d_rhoM_da = np.einsum("...nk,...nij->...kij", J, lam)
    dSk_da = np.stack(
        [dS_from(drho[..., k], d_rhoM_da[..., k, :, :]) for k in range(3)], axis=-3
    )
    zero = np.zeros_like(rho)
    d_rhoM_dt = rn[..., :, None, None] * dlam  # (..., n, 3, 3)
    dSk_dt = np.stack([dS_from(zero, d_rhoM_dt[..., n, :, :]) for n in range(3)], axis=-3)
    S = k_to_tensor(Sk)
    dS_da = k_to_tensor(dSk_da)
    dS_dt = k_to_tensor(dSk_dt)
    if not free:
        dS_dt = dS_dt.sum(axis=-3)
    return S, dS_da, dS_dt
