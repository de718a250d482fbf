"""Spectral diagnostics of the editing geometry.

Attenuation in eigen-coordinates, suppression bounds, the penalty/trust-region
correspondence for isotropic target regularization, ball-vs-ellipsoid gaps and
the two-request witness showing that one shared isotropic penalty cannot serve
an easy and a hard edit at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as la

from .memory import protected_count
from .solvers import SingularGeometryError, require_pd

__all__ = [
    "SpectralReport",
    "TrapWitness",
    "spectral_report",
    "trust_region_radius",
    "regularize_feasibility",
    "ball_ellipsoid_gap",
    "static_trap_witness",
    "trap_scan",
    "margin_to_progress",
]


@dataclass(frozen=True, eq=False)
class SpectralReport:
    eigenvalues: np.ndarray
    key_alignment: np.ndarray
    gamma: float
    beta: float
    protected_set: tuple
    suppression_upper_bound: float
    ridge: float = 0.0

    @property
    def protected_mass(self) -> float:
        """Share of ``||k||^2`` inside the protected set."""
        total = float(np.sum(self.key_alignment))
        if total == 0.0:
            return 0.0
        return float(np.sum(self.key_alignment[list(self.protected_set)])) / total

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "key_alignment": self.key_alignment.tolist(),
            "gamma": self.gamma,
            "beta": self.beta,
            "protected_set": list(self.protected_set),
            "suppression_upper_bound": self.suppression_upper_bound,
            "ridge": self.ridge,
        }


@dataclass(frozen=True)
class TrapWitness:
    lambda_min: float
    lambda_max: float
    tau: float
    a: float
    b: float
    m: float
    easy_interval: tuple
    hard_interval: tuple
    feasible: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["easy_interval"] = list(self.easy_interval)
        d["hard_interval"] = [self.hard_interval[0], None]
        return d


def _check_symmetric(A, tol=1e-10):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    # relative to the entry scale, so large spectra are not rejected for roundoff
    scale = max(1.0, float(np.max(np.abs(A), initial=0.0)))
    if np.max(np.abs(A - A.T), initial=0.0) > tol * scale:
        raise ValueError("matrix is not symmetric")
    return (A + A.T) / 2


def spectral_report(C, ridge, k, protected_fraction=0.25) -> SpectralReport:
    """Eigen-expansion of ``gamma = k^T (C + ridge I)^{-1} k``.

    ``gamma = sum_j (u_j^T k)^2 / (s_j + ridge)``. The protected set is the
    top ``ceil(protected_fraction * d0)`` eigendirections, and the bound
    ``||k||^2 / (||k||^2 + s_min,S + ridge)`` is valid whenever ``k`` lies
    entirely inside it.
    """
    C = _check_symmetric(C)
    k = np.asarray(k, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    w, U = np.linalg.eigh(C)
    order = np.argsort(w)[::-1]
    # roundoff negatives of a PSD matrix
    w = np.maximum(w[order], 0.0)
    U = U[:, order]
    shifted = w + ridge
    if shifted.size and shifted[-1] <= shifted.size * np.finfo(float).eps * max(shifted[0], 1e-300):
        raise SingularGeometryError("C + ridge I is singular")
    align = (U.T @ k) ** 2
    gamma = float(np.sum(align / shifted))
    n_top = protected_count(C.shape[0], protected_fraction)
    kk = float(k @ k)
    bound = kk / (kk + w[n_top - 1] + ridge)
    return SpectralReport(w, align, gamma, gamma / (1.0 + gamma), tuple(range(n_top)), bound, float(ridge))


def trust_region_radius(H, g, lambda_up) -> float:
    """``||(H + lambda I)^{-1} g||``, the radius of the equivalent spherical trust region."""
    H = _check_symmetric(H)
    g = np.asarray(g, dtype=float)
    cho = require_pd(H + lambda_up * np.eye(H.shape[0]), "H + lambda I")
    return float(np.linalg.norm(la.cho_solve(cho, g)))


def regularize_feasibility(A, eps=None):
    """``A + eps I``; with ``eps=None`` a singular ``A`` gets ``eps = 1e-8 lambda_max``."""
    A = _check_symmetric(A)
    w = np.linalg.eigvalsh(A)
    if eps is None:
        if w[0] > A.shape[0] * np.finfo(float).eps * abs(w[-1]):
            return A
        eps = 1e-8 * w[-1] if w[-1] > 0 else 1e-8
    if not eps > 0:
        raise ValueError("eps must be positive")
    return A + eps * np.eye(A.shape[0])


def ball_ellipsoid_gap(A_eps) -> float:
    """Ratio ``sqrt(lambda_max / lambda_min)`` between the smallest ball containing
    ``{u : u^T A u <= tau}`` and the largest ball inside it."""
    A = _check_symmetric(A_eps)
    w = np.linalg.eigvalsh(A)
    if w[0] <= 0:
        raise ValueError("A_eps must be positive definite")
    return math.sqrt(w[-1] / w[0])


def static_trap_witness(lambda_min, lambda_max, tau, a, b, m) -> TrapWitness:
    """Penalty intervals for the easy/hard request pair.

    The easy request (gradient ``-a e_min``) makes progress ``m`` only for
    ``lambda <= a / m``; the hard request (gradient ``-b e_max``) stays inside
    the feasibility ellipsoid only for ``lambda >= b sqrt(lambda_max / tau)``.
    """
    for name, value in (("lambda_min", lambda_min), ("lambda_max", lambda_max),
                        ("tau", tau), ("a", a), ("b", b), ("m", m)):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    if lambda_max < lambda_min:
        raise ValueError("lambda_max must be >= lambda_min")
    easy_hi = a / m
    hard_lo = b * math.sqrt(lambda_max / tau)
    return TrapWitness(float(lambda_min), float(lambda_max), float(tau), float(a), float(b),
                       float(m), (0.0, easy_hi), (hard_lo, math.inf), hard_lo <= easy_hi)


def trap_scan(witness: TrapWitness, n=10_000, lambdas=None):
    """Penalties on a log grid that satisfy both requests' predicates.

    Works directly from the displacements ``u_E = (a/lambda) e_min`` and
    ``u_H = (b/lambda) e_max`` in the eigenbasis of ``A_eps``, independently of
    the closed-form intervals stored in ``witness``.
    """
    w = witness
    if lambdas is None:
        top = 10.0 * w.b * math.sqrt(w.lambda_max / w.tau)
        lambdas = np.geomspace(top * 1e-8, top, n)
    A = np.diag([w.lambda_max, w.lambda_min])
    e_max, e_min = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    ok = []
    for lam in np.asarray(lambdas, dtype=float):
        u_E = (w.a / lam) * e_min
        u_H = (w.b / lam) * e_max
        progress = abs(e_min @ u_E) >= w.m
        feasible = u_H @ A @ u_H <= w.tau
        if progress and feasible:
            ok.append(lam)
    return np.array(ok)


def margin_to_progress(delta_logit, w_target, P_good) -> float:
    """Progress threshold ``m = Delta / ||P_good w||`` implied by a logit-margin demand."""
    Pw = np.asarray(P_good, dtype=float) @ np.asarray(w_target, dtype=float)
    nrm = float(np.linalg.norm(Pw))
    if nrm <= 1e-12:
        raise ValueError("target weight is annihilated by the safe-subspace projector")
    return float(delta_logit) / nrm
