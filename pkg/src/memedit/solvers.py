"""Closed-form weight editors for a single frozen key.

The covariance editor solves

    min_D  ||D k - delta||^2 + tr(D C D^T) + ridge ||D||_F^2

whose minimizer is ``D* = delta k^T (C_eff + k k^T)^{-1}`` with
``C_eff = C + ridge I``. The realized residual ``D* k`` is always the
requested residual shrunk by ``beta = gamma / (1 + gamma)``, where
``gamma = k^T C_eff^{-1} k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np
import scipy.linalg as la

from .memory import LayerMemory, SyntheticModel

__all__ = [
    "SingularGeometryError",
    "ConvergenceError",
    "SolveResult",
    "AllocationPlan",
    "require_pd",
    "sherman_morrison_inv",
    "edit_objective",
    "edit_objective_grad",
    "solve_closed_form",
    "solve_gradient_oracle",
    "solve_projection",
    "solve_layer",
    "allocate_residual",
    "solve_multilayer",
    "apply_updates",
]


class SingularGeometryError(np.linalg.LinAlgError):
    """The effective geometry is not positive definite."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SolveResult:
    delta: np.ndarray
    realized_residual: np.ndarray
    gamma: float
    beta: float
    target_residual: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    """Per-layer target outputs ``t_l``; layers absent from the map are not edited."""

    layer_targets: Dict[int, np.ndarray]
    scheme: str = "uniform"


def require_pd(A, what="effective geometry"):
    """Cholesky factor of ``A``; raise :class:`SingularGeometryError` if ``A`` is not PD.

    Matrices whose smallest eigenvalue is below ``n * eps * lambda_max`` count
    as singular; no pseudo-inverse fallback exists on purpose.
    """
    A = np.asarray(A, dtype=float)
    w = np.linalg.eigvalsh(A)
    if w[0] <= A.shape[0] * np.finfo(float).eps * max(abs(w[-1]), np.finfo(float).tiny):
        raise SingularGeometryError(
            f"{what} is singular or indefinite (smallest eigenvalue {w[0]:.3e})"
        )
    try:
        return la.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as err:  # pragma: no cover - guarded above
        raise SingularGeometryError(f"{what} is not positive definite") from err


def sherman_morrison_inv(base_inverse, k):
    """Return ``(A + k k^T)^{-1}`` given ``A^{-1}``.

    Raises
    ------
    ValueError
        If ``1 + k^T A^{-1} k <= 1e-14`` (near-singular rank-one update).
    """
    B = np.asarray(base_inverse, dtype=float)
    k = np.asarray(k, dtype=float)
    Bk = B @ k
    denom = 1.0 + k @ Bk
    if denom <= 1e-14:
        raise ValueError(f"Sherman-Morrison denominator {denom:.3e} is not positive")
    out = B - np.outer(Bk, k @ B) / denom
    return (out + out.T) / 2


def edit_objective(delta, layer: LayerMemory, target_residual) -> float:
    """Edit objective value at ``delta``."""
    D = np.asarray(delta, dtype=float)
    r = D @ layer.key - target_residual
    return float(r @ r + np.sum((D @ layer.covariance) * D) + layer.ridge * np.sum(D * D))


def edit_objective_grad(delta, layer: LayerMemory, target_residual):
    """``2 (D k - delta) k^T + 2 D C + 2 ridge D``."""
    D = np.asarray(delta, dtype=float)
    r = D @ layer.key - target_residual
    return 2.0 * np.outer(r, layer.key) + 2.0 * D @ layer.covariance + 2.0 * layer.ridge * D


def _augmented_inverse(layer: LayerMemory):
    """``(C_eff^{-1}, (C_eff + k k^T)^{-1})`` via one Cholesky and a rank-one update."""
    cho = require_pd(layer.effective_geometry())
    base = la.cho_solve(cho, np.eye(layer.d0))
    base = (base + base.T) / 2
    return base, sherman_morrison_inv(base, layer.key)


def solve_closed_form(layer: LayerMemory, target_residual) -> SolveResult:
    """Minimize the covariance/ridge objective exactly.

    Examples
    --------
    >>> import numpy as np
    >>> layer = LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.zeros((2, 2)), ridge=1.0)
    >>> res = solve_closed_form(layer, np.array([2.0, 4.0]))
    >>> res.delta.tolist(), res.beta
    ([[1.0, 0.0], [2.0, 0.0]], 0.5)
    """
    delta = np.asarray(target_residual, dtype=float)
    if delta.shape != (layer.d1,):
        raise ValueError(f"target residual has shape {delta.shape}, expected ({layer.d1},)")
    base, aug = _augmented_inverse(layer)
    k = layer.key
    gamma = float(k @ base @ k)
    D = np.outer(delta, k @ aug)
    return SolveResult(D, D @ k, gamma, gamma / (1.0 + gamma), delta)


def solve_gradient_oracle(layer: LayerMemory, target_residual, tol=1e-9, max_iter=200_000):
    """Plain gradient descent on the edit objective.

    Exists only as an independent check on :func:`solve_closed_form`. The step
    ``1 / (2 (lambda_max(C) + ridge + ||k||^2))`` is the inverse of a bound on
    the gradient's Lipschitz constant, so every iteration decreases the
    objective.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    delta = np.asarray(target_residual, dtype=float)
    k, C, lam = layer.key, layer.covariance, layer.ridge
    lmax = np.linalg.eigvalsh(C)[-1] if layer.d0 else 0.0
    step = 1.0 / (2.0 * (max(lmax, 0.0) + lam + k @ k))
    D = np.zeros((layer.d1, layer.d0))
    for _ in range(max_iter):
        G = 2.0 * (np.outer(D @ k - delta, k) + D @ C + lam * D)
        if np.linalg.norm(G) < tol:
            return D
        D = D - step * G
    raise ConvergenceError(f"gradient oracle did not reach ||grad|| < {tol} in {max_iter} steps")


def solve_projection(layer: LayerMemory, target_residual) -> SolveResult:
    """Null-space projected editor with isotropic penalty on the executed update.

    Solves for ``B = D P`` in ``min ||B k - delta||^2 + ridge ||B||_F^2`` on the
    projected key ``P k`` and returns ``D = B P``.
    """
    if layer.projector is None:
        raise ValueError("solve_projection needs a layer with a projector")
    lam = layer.ridge
    if not lam > 0:
        raise SingularGeometryError("projection editor needs ridge > 0 (isotropic coefficient)")
    delta = np.asarray(target_residual, dtype=float)
    if delta.shape != (layer.d1,):
        raise ValueError(f"target residual has shape {delta.shape}, expected ({layer.d1},)")
    P = layer.projector
    kp = P @ layer.key
    # (kp kp^T + lam I)^{-1} by Sherman-Morrison on (lam I)^{-1}
    inv = sherman_morrison_inv(np.eye(layer.d0) / lam, kp)
    B = np.outer(delta, kp @ inv)
    D = B @ P
    gamma = float(kp @ kp) / lam
    return SolveResult(D, D @ layer.key, gamma, gamma / (1.0 + gamma), delta)


def solve_layer(layer: LayerMemory, target_residual) -> SolveResult:
    """Dispatch to the projection editor when the layer carries a projector."""
    if layer.projector is not None:
        return solve_projection(layer, target_residual)
    return solve_closed_form(layer, target_residual)


def allocate_residual(model: SyntheticModel, v_star, edit_set: Optional[Iterable[int]] = None,
                      scheme="uniform") -> AllocationPlan:
    """Split the last-layer residual ``v* - W_L k_L`` over the edit set.

    ``v_star`` lives in the value space of the final layer. Under ``"uniform"``
    each edited layer receives ``t_l = W_l k_l + residual / |edit_set|``; under
    ``"last"`` the final layer takes the whole residual and every other edited
    layer keeps ``t_l = W_l k_l``. Either way the per-layer offsets sum to the
    residual.
    """
    layers = model.layers
    L = model.L
    edit_set = list(range(len(layers))) if edit_set is None else sorted(set(edit_set))
    if not edit_set:
        raise ValueError("edit set is empty")
    if L not in edit_set:
        raise ValueError("the final layer must belong to the edit set")
    for l in edit_set:
        if not 0 <= l <= L:
            raise ValueError(f"layer {l} is not in the model")
    v_star = np.asarray(v_star, dtype=float)
    if v_star.shape != (model.d1,):
        raise ValueError(f"v_star has shape {v_star.shape}, expected ({model.d1},)")
    residual = v_star - layers[L].weight @ layers[L].key
    targets = {}
    if scheme == "uniform":
        share = residual / len(edit_set)
        for l in edit_set:
            targets[l] = layers[l].weight @ layers[l].key + share
    elif scheme == "last":
        for l in edit_set:
            base = layers[l].weight @ layers[l].key
            targets[l] = base + residual if l == L else base
    else:
        raise ValueError(f"unknown allocation scheme {scheme!r}")
    return AllocationPlan(targets, scheme)


def solve_multilayer(model: SyntheticModel, plan: AllocationPlan) -> Dict[int, SolveResult]:
    """Solve every planned layer independently against its own geometry."""
    out = {}
    for l, target in sorted(plan.layer_targets.items()):
        layer = model.layers[l]
        out[l] = solve_layer(layer, target - layer.weight @ layer.key)
    return out


def apply_updates(model: SyntheticModel, results: Dict[int, SolveResult]):
    """Weight overrides ``{l: W_l + D_l}`` for :func:`memedit.memory.forward`."""
    return {l: model.layers[l].weight + res.delta for l, res in results.items()}
