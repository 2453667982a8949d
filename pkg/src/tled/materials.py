"""Hyperelastic and hyperviscoelastic stress evaluation (second Piola-Kirchhoff).

All stress functions are vectorized over leading axes: ``F`` has shape
(..., 3, 3) and the moduli broadcast against the leading shape.

Neo-Hookean (decoupled, nearly incompressible)::

    W = mu/2 (J^(-2/3) tr C - 3) + kappa/2 (J - 1)^2

Ogden, on isochoric principal stretches lb_a = J^(-1/3) l_a::

    W = sum_i 2 mu_i / alpha_i^2 (lb_1^alpha_i + lb_2^alpha_i + lb_3^alpha_i - 3)
        + kappa/2 (J - 1)^2

Viscous relaxation acts on the isochoric stress through a Prony series with
the usual recursive exponential update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ElementInversionError, MaterialError

NEO_HOOKEAN = "NeoHookean"
OGDEN_VISCO = "OgdenVisco"

_EYE = np.eye(3)


def det3(A):
    """Determinant of stacked 3x3 matrices (cofactor expansion)."""
    return (
        A[..., 0, 0] * (A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1])
        - A[..., 0, 1] * (A[..., 1, 0] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 0])
        + A[..., 0, 2] * (A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0])
    )


def inv3(A, det=None):
    """Inverse of stacked 3x3 matrices via the adjugate."""
    if det is None:
        det = det3(A)
    adj = np.empty(A.shape)
    adj[..., 0, 0] = A[..., 1, 1] * A[..., 2, 2] - A[..., 1, 2] * A[..., 2, 1]
    adj[..., 0, 1] = A[..., 0, 2] * A[..., 2, 1] - A[..., 0, 1] * A[..., 2, 2]
    adj[..., 0, 2] = A[..., 0, 1] * A[..., 1, 2] - A[..., 0, 2] * A[..., 1, 1]
    adj[..., 1, 0] = A[..., 1, 2] * A[..., 2, 0] - A[..., 1, 0] * A[..., 2, 2]
    adj[..., 1, 1] = A[..., 0, 0] * A[..., 2, 2] - A[..., 0, 2] * A[..., 2, 0]
    adj[..., 1, 2] = A[..., 0, 2] * A[..., 1, 0] - A[..., 0, 0] * A[..., 1, 2]
    adj[..., 2, 0] = A[..., 1, 0] * A[..., 2, 1] - A[..., 1, 1] * A[..., 2, 0]
    adj[..., 2, 1] = A[..., 0, 1] * A[..., 2, 0] - A[..., 0, 0] * A[..., 2, 1]
    adj[..., 2, 2] = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return adj / np.asarray(det)[..., None, None]


def moduli_from_E_nu(E, nu):
    """Shear and bulk moduli (Pa) from Young's modulus and Poisson's ratio."""
    if E <= 0:
        raise MaterialError(f"Young's modulus must be positive, got {E}")
    if not 0.0 <= nu < 0.5:
        raise MaterialError(
            f"Poisson's ratio must lie in [0, 0.5), got {nu}; "
            "model incompressibility with nu close to (not equal to) 0.5"
        )
    return E / (2.0 * (1.0 + nu)), E / (3.0 * (1.0 - 2.0 * nu))


@dataclass(frozen=True)
class MaterialParams:
    model: str = NEO_HOOKEAN
    E: float = 3000.0
    nu: float = 0.49
    ogden_mu: tuple = ()
    ogden_alpha: tuple = ()
    prony: tuple = ()  # ((g_k, tau_k), ...)
    density: float = 1000.0

    def __post_init__(self):
        moduli_from_E_nu(self.E, self.nu)
        if self.model not in (NEO_HOOKEAN, OGDEN_VISCO):
            raise MaterialError(f"unknown material model {self.model!r}")
        object.__setattr__(self, "ogden_mu", tuple(float(m) for m in self.ogden_mu))
        object.__setattr__(self, "ogden_alpha", tuple(float(a) for a in self.ogden_alpha))
        object.__setattr__(self, "prony", tuple((float(g), float(t)) for g, t in self.prony))
        if self.model == OGDEN_VISCO:
            if len(self.ogden_mu) < 1 or len(self.ogden_mu) != len(self.ogden_alpha):
                raise MaterialError("ogden_mu and ogden_alpha need equal length >= 1")
            if any(a == 0 for a in self.ogden_alpha):
                raise MaterialError("Ogden exponents must be non-zero")
        if self.prony:
            if sum(g for g, _ in self.prony) >= 1.0 or any(g < 0 for g, _ in self.prony):
                raise MaterialError("Prony relative moduli must be >= 0 and sum to < 1")
            if any(t <= 0 for _, t in self.prony):
                raise MaterialError("Prony relaxation times must be positive")
        if self.density <= 0:
            raise MaterialError("density must be positive")

    @property
    def mu(self) -> float:
        return moduli_from_E_nu(self.E, self.nu)[0]

    @property
    def kappa(self) -> float:
        return moduli_from_E_nu(self.E, self.nu)[1]

    @property
    def long_term_factor(self) -> float:
        return 1.0 - sum(g for g, _ in self.prony)

    @classmethod
    def matched_ogden(cls, E, nu, prony=(), density=1000.0) -> "MaterialParams":
        """One-term Ogden (alpha = 2) with the same small-strain shear modulus."""
        mu, _ = moduli_from_E_nu(E, nu)
        return cls(OGDEN_VISCO, E, nu, (mu,), (2.0,), prony, density)


def _check_det(F):
    J = det3(F)
    bad = J <= 0
    if np.any(bad):
        flat = np.nonzero(np.ravel(bad))[0][0]
        Fb = np.reshape(F, (-1, 3, 3))[flat]
        raise ElementInversionError(Fb, int(flat) if np.ndim(J) else None)
    return J


def _kinematics(F):
    J = _check_det(F)
    C = np.matmul(np.swapaxes(F, -1, -2), F)
    Cinv = inv3(C, J * J)
    return J, C, Cinv


def volumetric_pressure(J, kappa):
    return kappa * (J - 1.0)


def volumetric_energy(J, kappa):
    return 0.5 * kappa * (J - 1.0) ** 2


# ---------------------------------------------------------------------------
# Neo-Hookean


def neo_hookean_energy(F, mu, kappa):
    J = _check_det(F)
    I1 = np.einsum("...ij,...ij->...", F, F)
    return 0.5 * mu * (J ** (-2.0 / 3.0) * I1 - 3.0) + volumetric_energy(J, kappa)


def neo_hookean_isochoric(F, mu, J=None, C=None, Cinv=None):
    """Isochoric part mu J^(-2/3) (I - tr(C)/3 C^-1)."""
    if J is None:
        J, C, Cinv = _kinematics(F)
    I1 = np.trace(C, axis1=-2, axis2=-1)
    mu = np.asarray(mu, dtype=float)[..., None, None]
    return mu * J[..., None, None] ** (-2.0 / 3.0) * (_EYE - (I1 / 3.0)[..., None, None] * Cinv)


def pk2_neo_hookean(F, mu, kappa):
    F = np.asarray(F, dtype=float)
    J, C, Cinv = _kinematics(F)
    S_iso = neo_hookean_isochoric(F, mu, J, C, Cinv)
    p = volumetric_pressure(J, np.asarray(kappa, dtype=float))
    return S_iso + (p * J)[..., None, None] * Cinv


# ---------------------------------------------------------------------------
# Ogden


def _principal(C):
    lam2, N = np.linalg.eigh(C)
    return np.sqrt(lam2), N


def ogden_energy(F, params: MaterialParams):
    F = np.asarray(F, dtype=float)
    J, C, _ = _kinematics(F)
    lam, _ = _principal(C)
    lb = lam * J[..., None] ** (-1.0 / 3.0)
    W = np.zeros(J.shape)
    for m, a in zip(params.ogden_mu, params.ogden_alpha):
        W = W + 2.0 * m / a ** 2 * (np.sum(lb ** a, axis=-1) - 3.0)
    return W + volumetric_energy(J, params.kappa)


def ogden_isochoric(F, params: MaterialParams, J=None, C=None):
    """Isochoric Ogden PK2 via the spectral form S = sum_a tau_a / l_a^2 N_a N_a.

    The principal Kirchhoff stress tau_a depends only on l_a (plus invariant
    terms), so equal stretches give equal coefficients and the result is
    independent of the (arbitrary) eigenvector basis eigh returns in that case;
    no 0/0 arises for stresses.
    """
    if J is None:
        J, C, _ = _kinematics(F)
    lam, N = _principal(C)
    lb = lam * J[..., None] ** (-1.0 / 3.0)
    tau = np.zeros(lam.shape)
    for m, a in zip(params.ogden_mu, params.ogden_alpha):
        pa = lb ** a
        tau = tau + 2.0 * m / a * (pa - pa.mean(axis=-1, keepdims=True))
    coef = tau / lam ** 2
    return np.einsum("...ia,...a,...ja->...ij", N, coef, N)


def pk2_ogden(F, params: MaterialParams):
    F = np.asarray(F, dtype=float)
    J, C, Cinv = _kinematics(F)
    S_iso = ogden_isochoric(F, params, J, C)
    return S_iso + (volumetric_pressure(J, params.kappa) * J)[..., None, None] * Cinv


@dataclass
class ViscoState:
    """History for the Prony series at a batch of points.

    ``h`` holds one stress-like tensor per Prony term, shape (..., K, 3, 3);
    ``s_prev`` is the previous instantaneous isochoric stress, (..., 3, 3).
    """

    h: np.ndarray
    s_prev: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, shape, n_terms: int) -> "ViscoState":
        shape = tuple(shape)
        return cls(np.zeros(shape + (n_terms, 3, 3)), np.zeros(shape + (3, 3)), 0.0)


def isochoric_stress(F, params: MaterialParams, J=None, C=None, Cinv=None):
    if params.model == NEO_HOOKEAN:
        return neo_hookean_isochoric(F, params.mu, J, C, Cinv)
    return ogden_isochoric(F, params, J, C)


def _visco_update(F, dt, params, state):
    F = np.asarray(F, dtype=float)
    J, C, Cinv = _kinematics(F)
    s0 = isochoric_stress(F, params, J, C, Cinv)
    if state is None:
        state = ViscoState.zeros(F.shape[:-2], len(params.prony))
    ds = s0 - state.s_prev
    new_h = np.empty_like(state.h)
    s_iso = params.long_term_factor * s0
    for k, (g, tau) in enumerate(params.prony):
        x = dt / tau
        decay = np.exp(-x)
        # linear variation of s0 over the step; beta -> 1 as dt -> 0
        beta = 1.0 if x == 0 else -np.expm1(-x) / x
        new_h[..., k, :, :] = decay * state.h[..., k, :, :] + g * beta * ds
        s_iso = s_iso + new_h[..., k, :, :]
    S = s_iso + (volumetric_pressure(J, params.kappa) * J)[..., None, None] * Cinv
    return S, ViscoState(new_h, s0, state.t + dt)


def pk2_ogden_visco(F, dt, params: MaterialParams, state: ViscoState | None = None):
    """Ogden hyperviscoelastic PK2 stress and the advanced history state.

    With an empty Prony series this is plain hyperelastic Ogden. A NeoHookean
    ``params`` is accepted too (its isochoric part then relaxes).
    """
    if dt <= 0:
        raise MaterialError(f"time step must be positive, got {dt}")
    return _visco_update(F, float(dt), params, state)


def pk2(F, params: MaterialParams):
    """Elastic (instantaneous) PK2 stress for either model."""
    if params.model == NEO_HOOKEAN:
        return pk2_neo_hookean(F, params.mu, params.kappa)
    return pk2_ogden(F, params)


def strain_energy(F, params: MaterialParams):
    if params.model == NEO_HOOKEAN:
        return neo_hookean_energy(F, params.mu, params.kappa)
    return ogden_energy(F, params)


def resubstitute_stress(F_field, params: MaterialParams, times=None):
    """Evaluate ``params`` on stored deformation gradients.

    ``F_field`` is either a snapshot (n, 3, 3), giving the instantaneous
    response, or a history (steps, n, 3, 3) sampled at ``times`` (steps,),
    in which case the viscous history is integrated from a zero state and the
    stress at every stored step is returned.
    """
    F_field = np.asarray(F_field, dtype=float)
    if F_field.size == 0:
        return np.zeros(F_field.shape)
    if times is None:
        S, _ = _visco_update(F_field, 0.0, params, None)
        return S
    times = np.asarray(times, dtype=float)
    if len(times) != len(F_field):
        raise MaterialError("times must match the number of stored steps")
    out = np.empty_like(F_field)
    state = None
    t_prev = times[0]
    for i, F in enumerate(F_field):
        out[i], state = _visco_update(F, float(times[i] - t_prev), params, state)
        t_prev = times[i]
    return out
