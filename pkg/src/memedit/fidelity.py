"""How well the single-layer gate gradient tracks the true multi-layer hypergradient.

The true hypergradient of ``F(v*) = task_loss(model edited by the multi-layer
solver at v*)`` is measured by central finite differences through full
solves; the proxy is ``s_L M_L^T``. Helpers here also check the perturbation
bounds that make the proxy trustworthy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .memory import SyntheticModel
from .meta import EditRequest, StructuralGate, build_gate, task_grad, task_losses
from .solvers import allocate_residual, apply_updates, solve_layer, solve_multilayer

__all__ = [
    "PreconditionError",
    "FidelityReport",
    "GeometryDiscrepancy",
    "central_gradient",
    "edited_overrides",
    "task_objective",
    "true_hypergradient",
    "richardson_ratio",
    "proxy_hypergradient",
    "layer_channels",
    "dominance_ratio",
    "check_inverse_perturbation",
    "check_geometry_discrepancy",
    "fit_origin_line",
    "fidelity_report",
]

LossFn = Callable[[SyntheticModel, Dict[int, np.ndarray]], float]


class PreconditionError(ValueError):
    """A bound's hypothesis does not hold on the given instance."""


def central_gradient(f, x, h):
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = f(x + e), f(x - e)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"objective is not finite at probe {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def _default_loss(request):
    def loss(model, overrides):
        edit, loc = task_losses(model, overrides, request)
        return edit + loc
    return loss


def edited_overrides(model, v_star, scheme="last", edit_set=None):
    plan = allocate_residual(model, v_star, edit_set, scheme)
    return apply_updates(model, solve_multilayer(model, plan))


def task_objective(model, request, v_star, scheme="last", edit_set=None, loss: Optional[LossFn] = None):
    """``F(v*)``: task loss after a full multi-layer solve at ``v*``."""
    loss = loss or _default_loss(request)
    return loss(model, edited_overrides(model, v_star, scheme, edit_set))


def true_hypergradient(model: SyntheticModel, request: EditRequest, v_star, fd_step=1e-4, *,
                       scheme="last", edit_set=None, loss: Optional[LossFn] = None):
    """Finite-difference gradient of ``F`` at ``v_star``; each probe is a full solve."""
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    return central_gradient(
        lambda v: task_objective(model, request, v, scheme, edit_set, loss), v_star, fd_step)


def richardson_ratio(grad_at, h):
    """``||G(h) - G(h/2)|| / ||G(h/2) - G(h/4)||``; about 4 for an O(h^2) scheme.

    Returns ``nan`` when the differences are already at roundoff level.
    """
    g1, g2, g4 = grad_at(h), grad_at(h / 2), grad_at(h / 4)
    num, den = np.linalg.norm(g1 - g2), np.linalg.norm(g2 - g4)
    scale = np.linalg.norm(g2) + 1.0
    if num < 1e-9 * scale or den == 0.0:
        return float("nan")
    return float(num / den)


def proxy_hypergradient(s_L, gate: StructuralGate):
    """``s_L M_L^T``."""
    return np.asarray(s_L, dtype=float) @ gate.gate_row


def layer_channels(model, request, v_star, fd_step=1e-4, *, scheme="last", edit_set=None,
                   loss: Optional[LossFn] = None):
    """Per-layer hypergradient channels ``J_l^T s_l``.

    Channel ``l`` differentiates ``F`` with only layer ``l``'s update
    following ``v*``; every other layer stays frozen at its solved update.
    """
    loss = loss or _default_loss(request)
    v_star = np.asarray(v_star, dtype=float)
    frozen = edited_overrides(model, v_star, scheme, edit_set)
    out = {}
    for l in frozen:
        def F_l(v, l=l):
            plan = allocate_residual(model, v, edit_set, scheme)
            layer = model.layers[l]
            res = solve_layer(layer, plan.layer_targets[l] - layer.weight @ layer.key)
            overrides = dict(frozen)
            overrides[l] = layer.weight + res.delta
            return loss(model, overrides)
        out[l] = central_gradient(F_l, v_star, fd_step)
    return out


def _rho(channels, L):
    head = np.linalg.norm(channels[L])
    if head < 1e-12:
        raise ZeroDivisionError("last-layer channel vanishes; dominance ratio undefined")
    tail = sum((c for l, c in channels.items() if l != L), np.zeros_like(channels[L]))
    return float(np.linalg.norm(tail) / head)


def dominance_ratio(model, request, v_star, fd_step=1e-4, *, scheme="last", edit_set=None) -> float:
    """``||sum_{l != L} J_l^T s_l|| / ||J_L^T s_L||`` (Euclidean norms)."""
    channels = layer_channels(model, request, v_star, fd_step, scheme=scheme, edit_set=edit_set)
    return _rho(channels, model.L)


def check_inverse_perturbation(A, E) -> dict:
    """Compare ``||(A+E)^{-1} - A^{-1}||`` with ``eps / (mu (mu - eps))``.

    Raises :class:`PreconditionError` when ``||E|| >= lambda_min(A)``.
    """
    A = np.asarray(A, dtype=float)
    E = np.asarray(E, dtype=float)
    mu = float(np.linalg.eigvalsh(A)[0])
    eps = float(np.linalg.norm(E, 2)) if E.size else 0.0
    if not mu > 0:
        raise PreconditionError("A is not positive definite")
    if eps >= mu:
        raise PreconditionError(f"||E||_2 = {eps:.6g} >= lambda_min(A) = {mu:.6g}")
    actual = float(np.linalg.norm(np.linalg.inv(A + E) - np.linalg.inv(A), 2))
    bound = eps / (mu * (mu - eps))
    return {"bound": bound, "actual": actual, "holds": actual <= bound + 1e-12, "mu": mu, "eps": eps}


@dataclass(frozen=True)
class GeometryDiscrepancy:
    max_discrepancy: float
    bound_constant_fit: float
    two_term_bound: float
    eps_C: float
    eps_k: float
    mu: float
    key_term: float
    inverse_term: float

    def to_dict(self):
        return dict(self.__dict__)


def check_geometry_discrepancy(model: SyntheticModel) -> GeometryDiscrepancy:
    """Max gate discrepancy ``||M_l - M_L||`` against the layers' measured drift.

    ``bound_constant_fit`` is ``max_discrepancy / (eps_C + eps_k)`` (0 without
    drift); ``two_term_bound`` is the explicit two-term bound
    ``eps_k / mu + ||k_L|| e / (mu (mu - e))`` with ``e = eps_C + 2 B_k eps_k``.
    ``key_term`` and ``inverse_term`` are the largest norms of the two pieces
    ``(k_l - k_L)^T A_l^{-1}`` and ``k_L^T (A_l^{-1} - A_L^{-1})``.
    """
    layers = model.layers
    last = layers[-1]
    eps_C = max(float(np.linalg.norm(l.covariance - last.covariance, 2)) for l in layers)
    eps_k = max(float(np.linalg.norm(l.key - last.key)) for l in layers)
    B_k = max(float(np.linalg.norm(l.key)) for l in layers)
    mu = min(float(np.linalg.eigvalsh(l.effective_geometry())[0]) for l in layers)
    e = eps_C + 2.0 * B_k * eps_k
    if not e < mu:
        raise PreconditionError(
            f"eps_C + 2 B_k eps_k = {e:.6g} is not below mu = {mu:.6g}")
    gates = [build_gate(l) for l in layers]
    A_L_inv = gates[-1].cached_inverse
    disc = key_term = inv_term = 0.0
    for layer, gate in zip(layers, gates):
        disc = max(disc, float(np.linalg.norm(gate.gate_row - gates[-1].gate_row)))
        key_term = max(key_term, float(np.linalg.norm((layer.key - last.key) @ gate.cached_inverse)))
        inv_term = max(inv_term, float(np.linalg.norm(last.key @ (gate.cached_inverse - A_L_inv))))
    drift = eps_C + eps_k
    fit = disc / drift if drift > 0 else 0.0
    bound = eps_k / mu + np.linalg.norm(last.key) * e / (mu * (mu - e))
    return GeometryDiscrepancy(disc, fit, float(bound), eps_C, eps_k, mu, key_term, inv_term)


def fit_origin_line(x: Sequence[float], y: Sequence[float]) -> dict:
    """Smallest slope ``c`` with ``y_i <= c x_i`` for all points, plus the least-squares slope.

    Residuals ``y - c x`` are one-sided (non-positive) by construction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0):
        raise ValueError("drift values must be positive")
    envelope = float(np.max(y / x))
    # y / x * x can overshoot y by an ulp; nudge up until the envelope really holds
    while np.any(y - envelope * x > 0):
        envelope = float(np.nextafter(envelope, np.inf))
    ls = float(x @ y / (x @ x))
    return {"slope": envelope, "ls_slope": ls, "residuals": (y - envelope * x).tolist(),
            "ratios": (y / x).tolist()}


@dataclass(frozen=True, eq=False)
class FidelityReport:
    g_true: np.ndarray
    g_proxy: np.ndarray
    g_L: np.ndarray
    rho: float
    alpha: float
    inner_product: float
    cosine: float
    error_norm: float
    eps_C_measured: float
    eps_k_measured: float
    s_L_norm: float = 0.0
    gate_norm: float = 0.0
    fd_step: float = 1e-4
    richardson: float = float("nan")
    descent_expected: bool = False

    @property
    def descent(self) -> bool:
        return self.inner_product > 0

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, float) and not math.isfinite(v):
                v = None  # strict JSON has no nan/inf
            out[k] = v
        out["descent"] = self.descent
        return out


def fidelity_report(model: SyntheticModel, request: EditRequest, v_star, *, scheme="last",
                    edit_set=None, fd_step=1e-4, max_halvings=3) -> FidelityReport:
    """Assemble true vs proxy hypergradient, dominance and alignment measures.

    The finite-difference step is halved (up to ``max_halvings`` times) while
    the Richardson ratio of the oracle falls outside ``4 +- 30%``.
    ``descent_expected`` marks instances with no measured drift and
    ``rho < 1e-6``, where a positive inner product is guaranteed.
    """
    v_star = np.asarray(v_star, dtype=float)
    L = model.L
    overrides = edited_overrides(model, v_star, scheme, edit_set)
    s_L = task_grad(model, overrides, request)
    gate = build_gate(model.layers[L], L)
    g_proxy = proxy_hypergradient(s_L, gate)

    step = fd_step
    ratio = float("nan")
    for _ in range(max_halvings + 1):
        ratio = richardson_ratio(
            lambda h: true_hypergradient(model, request, v_star, h, scheme=scheme, edit_set=edit_set),
            step)
        if math.isnan(ratio) or abs(ratio - 4.0) <= 1.2:
            break
        step /= 2
    g_true = true_hypergradient(model, request, v_star, step, scheme=scheme, edit_set=edit_set)
    channels = layer_channels(model, request, v_star, step, scheme=scheme, edit_set=edit_set)
    g_L = channels[L]
    try:
        rho = _rho(channels, L)
    except ZeroDivisionError:
        rho = float("inf") if len(channels) > 1 else 0.0

    s_norm = float(np.linalg.norm(s_L))
    m_norm = gate.norm()
    denom = s_norm * m_norm
    alpha = float(np.linalg.norm(g_proxy) / denom) if denom > 0 else 0.0
    inner = float(g_true @ g_proxy)
    nt, np_ = np.linalg.norm(g_true), np.linalg.norm(g_proxy)
    cosine = float(np.clip(inner / (nt * np_), -1.0, 1.0)) if nt > 0 and np_ > 0 else 0.0

    last = model.layers[-1]
    eps_C = max(float(np.linalg.norm(l.covariance - last.covariance, 2)) for l in model.layers)
    eps_k = max(float(np.linalg.norm(l.key - last.key)) for l in model.layers)
    return FidelityReport(
        g_true, g_proxy, g_L, rho, alpha, inner, cosine,
        float(np.linalg.norm(g_true - g_proxy)), eps_C, eps_k,
        s_norm, m_norm, step, ratio,
        descent_expected=(rho < 1e-6 and eps_C == 0.0 and eps_k == 0.0),
    )
