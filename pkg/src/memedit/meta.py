"""Feasibility-aware target optimization through the structural gate.

The final layer's closed-form editor maps a target ``v*`` to the update
``(v* - W_L k_L) M`` with the row operator

    M = k_L^T (C_L + ridge I + k_L k_L^T)^{-1}.

Because this map is linear in ``v*``, the gradient of any loss of the edited
weights with respect to ``v*`` is the weight-space gradient times ``M^T``.
:func:`metake_run` iterates that look-ahead/correct step; the open-loop
baselines plan ``v*`` without looking at the editor at all.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional

import numpy as np
import scipy.linalg as la
from scipy.special import log_softmax, softmax

from .memory import LayerMemory, SyntheticModel, forward, hidden_state
from .solvers import require_pd, sherman_morrison_inv
from .spectral import margin_to_progress

__all__ = [
    "DivergenceError",
    "StructuralGate",
    "EditRequest",
    "MetaLoss",
    "MetaTrace",
    "build_gate",
    "proxy_update",
    "task_losses",
    "task_grad",
    "meta_loss",
    "meta_loss_grad_W",
    "metake_run",
    "static_target_baseline",
    "margin_target",
]

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """A loss or iterate became non-finite; ``trace`` holds the iterations so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class StructuralGate:
    gate_row: np.ndarray
    source_layer: int
    cached_inverse: np.ndarray
    beta: float = float("nan")  # M k_L

    def norm(self) -> float:
        return float(np.linalg.norm(self.gate_row))


def build_gate(layer_L: LayerMemory, source_layer: int = -1) -> StructuralGate:
    """Precompute ``M`` and the inverse it is read from.

    For a projector layer the executed channel is ``P k`` with isotropic
    penalty, so the cached inverse is ``P (P k k^T P + ridge I)^{-1} P`` and
    ``M k`` again equals the layer's attenuation.
    """
    k = layer_L.key
    if layer_L.projector is None:
        cho = require_pd(layer_L.effective_geometry())
        base = la.cho_solve(cho, np.eye(layer_L.d0))
        inv = sherman_morrison_inv((base + base.T) / 2, k)
    else:
        if not layer_L.ridge > 0:
            raise ValueError("projection gate needs ridge > 0")
        P = layer_L.projector
        inv = P @ sherman_morrison_inv(np.eye(layer_L.d0) / layer_L.ridge, P @ k) @ P
        inv = (inv + inv.T) / 2
    M = k @ inv
    return StructuralGate(M, source_layer, inv, float(M @ k))


def proxy_update(v_star, layer_L: LayerMemory, gate: StructuralGate):
    """Rank-one look-ahead update ``(v* - W_L k_L) M``."""
    residual = np.asarray(v_star, dtype=float) - layer_L.weight @ layer_L.key
    return np.outer(residual, gate.gate_row)


@dataclass(frozen=True, eq=False)
class EditRequest:
    edit_key: np.ndarray
    target_class: int
    v_init: np.ndarray
    paraphrase_keys: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    locality_keys: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    reg_weight: float = 0.1

    def __post_init__(self):
        k = np.asarray(self.edit_key, dtype=float)
        d0 = k.size
        para = np.asarray(self.paraphrase_keys, dtype=float).reshape(-1, d0)
        loc = np.asarray(self.locality_keys, dtype=float).reshape(-1, d0)
        if int(self.target_class) != self.target_class or self.target_class < 0:
            raise ValueError(f"target_class must be a non-negative integer, got {self.target_class}")
        if not self.reg_weight >= 0:
            raise ValueError("reg_weight must be non-negative")
        kn = np.linalg.norm(k)
        for name, keys in (("paraphrase", para), ("locality", loc)):
            for x in keys:
                cos = x @ k / max(np.linalg.norm(x) * kn, 1e-300)
                if cos >= 1.0 - 1e-9:
                    raise ValueError(f"{name} key duplicates the edit key")
        object.__setattr__(self, "edit_key", k)
        object.__setattr__(self, "target_class", int(self.target_class))
        object.__setattr__(self, "v_init", np.asarray(self.v_init, dtype=float))
        object.__setattr__(self, "paraphrase_keys", para)
        object.__setattr__(self, "locality_keys", loc)
        object.__setattr__(self, "reg_weight", float(self.reg_weight))


@dataclass(frozen=True)
class MetaLoss:
    edit_loss: float
    loc_loss: float
    reg_loss: float
    total: float


def _check_target(model, request):
    if not 0 <= request.target_class < model.V:
        raise ValueError(f"target_class {request.target_class} outside [0, {model.V})")


def task_losses(model: SyntheticModel, overrides: Mapping[int, np.ndarray], request: EditRequest):
    """``(edit NLL, summed locality KL(P_pre || P_post))`` under ``overrides``."""
    _check_target(model, request)
    z = forward(model, request.edit_key, overrides)
    edit = -float(log_softmax(z)[request.target_class])
    loc = 0.0
    for x in request.locality_keys:
        lp_pre = log_softmax(forward(model, x))
        lp_post = log_softmax(forward(model, x, overrides))
        loc += float(np.sum(np.exp(lp_pre) * (lp_pre - lp_post)))
    return edit, loc


def task_grad(model: SyntheticModel, overrides, request: EditRequest, terms=("edit", "loc")):
    """Gradient of the task losses w.r.t. any one layer's weight.

    Every layer reads the same input, so the gradient is identical for all
    layers: ``sum_x U^T (p_post(x) - q(x)) x^T`` with ``q`` the one-hot target
    at the edit key and ``P_pre`` at locality keys.
    """
    _check_target(model, request)
    U = model.readout
    G = np.zeros((model.d1, model.d0))
    if "edit" in terms:
        p = softmax(forward(model, request.edit_key, overrides))
        p[request.target_class] -= 1.0
        G += np.outer(U.T @ p, request.edit_key)
    if "loc" in terms:
        for x in request.locality_keys:
            p_pre = softmax(forward(model, x))
            p_post = softmax(forward(model, x, overrides))
            G += np.outer(U.T @ (p_post - p_pre), x)
    return G


def _virtual(model, virtual_W_L):
    W = np.asarray(virtual_W_L, dtype=float)
    if W.shape != model.layers[-1].weight.shape:
        raise ValueError(f"virtual weight shape {W.shape} != {model.layers[-1].weight.shape}")
    return {model.L: W}


def meta_loss(model: SyntheticModel, virtual_W_L, request: EditRequest, v_star=None) -> MetaLoss:
    """Edit NLL + locality KL at the virtual final-layer weight, plus ``reg_weight ||v* - v_init||^2``.

    ``v_star`` defaults to ``v_init`` (zero regularization).
    """
    edit, loc = task_losses(model, _virtual(model, virtual_W_L), request)
    reg = 0.0
    if v_star is not None:
        d = np.asarray(v_star, dtype=float) - request.v_init
        reg = request.reg_weight * float(d @ d)
    return MetaLoss(edit, loc, reg, edit + loc + reg)


def meta_loss_grad_W(model: SyntheticModel, virtual_W_L, request: EditRequest, terms=("edit", "loc")):
    """Analytic gradient of edit + locality loss w.r.t. the virtual final-layer weight."""
    return task_grad(model, _virtual(model, virtual_W_L), request, terms)


@dataclass
class MetaTrace:
    iterations: List[dict] = field(default_factory=list)
    converged: bool = False
    final_v_star: Optional[np.ndarray] = None

    def summary(self) -> dict:
        if not self.iterations:
            return {"iterations": 0, "converged": self.converged}
        first, last = self.iterations[0], self.iterations[-1]
        return {
            "iterations": len(self.iterations),
            "converged": self.converged,
            "total_first": first["edit_loss"] + first["loc_loss"] + first["reg_loss"],
            "total_last": last["edit_loss"] + last["loc_loss"] + last["reg_loss"],
            "grad_norm_last": last["grad_norm"],
        }

    def to_jsonl(self, path=None) -> str:
        lines = []
        for it in self.iterations:
            rec = dict(it)
            rec["v_star"] = np.asarray(rec["v_star"]).tolist()
            lines.append(json.dumps(rec))
        text = "\n".join(lines) + ("\n" if lines else "")
        if path is not None:
            Path(path).write_text(text)
        return text


def metake_run(model: SyntheticModel, request: EditRequest, eta=5e-3, T=15, *,
               optimizer="sgd", tol=1e-6, early_stop=True, adam_betas=(0.9, 0.999),
               adam_eps=1e-8, gate: Optional[StructuralGate] = None) -> MetaTrace:
    """Look-ahead and correct.

    Each iteration forms the virtual final-layer weight ``W_L + (v* - W_L k_L) M``,
    evaluates the meta-loss there and steps ``v*`` along

        g = (dL/dW_hat) M^T + 2 reg_weight (v* - v_init).

    ``optimizer="adam"`` swaps the raw step for Adam moment accumulation on
    ``g``. With ``early_stop=False`` all ``T`` iterations run even after the
    gradient falls below ``tol``.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if T < 1:
        raise ValueError("T must be at least 1")
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    _check_target(model, request)
    layer = model.layers[-1]
    if gate is None:
        gate = build_gate(layer, model.L)
    M = gate.gate_row
    beta = float(M @ layer.key)
    v = request.v_init.copy()
    m1 = np.zeros_like(v)
    m2 = np.zeros_like(v)
    trace = MetaTrace()
    for t in range(T):
        W_hat = layer.weight + proxy_update(v, layer, gate)
        # overflow is detected below and reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            losses = meta_loss(model, W_hat, request, v)
            g = meta_loss_grad_W(model, W_hat, request) @ M + 2.0 * request.reg_weight * (v - request.v_init)
            gnorm = float(np.linalg.norm(g))
        trace.iterations.append({
            "t": t,
            "v_star": v.copy(),
            "edit_loss": losses.edit_loss,
            "loc_loss": losses.loc_loss,
            "reg_loss": losses.reg_loss,
            "grad_norm": gnorm,
            "beta_current": beta,
        })
        if not (np.isfinite(losses.total) and np.isfinite(gnorm)):
            trace.final_v_star = v.copy()
            raise DivergenceError(f"meta-loss diverged at iteration {t}", trace)
        if gnorm < tol:
            trace.converged = True
            if early_stop:
                break
        if optimizer == "sgd":
            v = v - eta * g
        else:
            b1, b2 = adam_betas
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            mhat = m1 / (1 - b1 ** (t + 1))
            vhat = m2 / (1 - b2 ** (t + 1))
            v = v - eta * mhat / (np.sqrt(vhat) + adam_eps)
    trace.final_v_star = v
    totals = [it["edit_loss"] + it["loc_loss"] + it["reg_loss"] for it in trace.iterations]
    rises = sum(b > a + 1e-12 for a, b in zip(totals, totals[1:]))
    if rises:
        logger.debug("meta-loss increased on %d of %d iterations", rises, len(totals) - 1)
    return trace


def _rest_hidden(model, key):
    """Residual stream at ``key`` without the final layer's contribution."""
    layer = model.layers[-1]
    return hidden_state(model, key) - layer.weight @ key


def static_target_baseline(model: SyntheticModel, request: EditRequest, lambda_up=1.0,
                           steps=15, lr=0.1) -> np.ndarray:
    """Open-loop target: minimize ``NLL(U (h_rest + v)) + lambda_up/2 ||v - v_init||^2`` over ``v``.

    The quadratic penalty is applied as a proximal step, so the iteration is
    stable for any ``lambda_up`` (including the ``lambda_up -> inf`` limit,
    which pins ``v`` to ``v_init``).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not lr > 0 or not lambda_up >= 0:
        raise ValueError("lr must be positive and lambda_up non-negative")
    _check_target(model, request)
    U = model.readout
    h_rest = _rest_hidden(model, request.edit_key)
    v = request.v_init.copy()
    for _ in range(steps):
        p = softmax(U @ (h_rest + v))
        p[request.target_class] -= 1.0
        v = (v - lr * (U.T @ p) + lr * lambda_up * request.v_init) / (1.0 + lr * lambda_up)
        if not np.all(np.isfinite(v)):
            raise DivergenceError("static baseline diverged")
    return v


def margin_target(model: SyntheticModel, request: EditRequest, margin=1.0) -> np.ndarray:
    """Single-shot plan: the shift of ``v_init`` along the target's readout row
    that puts the target ``margin`` logits above every rival, assuming the
    editor realizes it in full.

    The step length is ``margin_to_progress(required_gain, U[target], I)``.
    With orthonormal readout rows only the target logit moves.
    """
    _check_target(model, request)
    U = model.readout
    o = request.target_class
    z = U @ (_rest_hidden(model, request.edit_key) + request.v_init)
    gain = np.max(np.delete(z, o)) - z[o] + margin
    if gain <= 0:
        return request.v_init.copy()
    w = U[o]
    step = margin_to_progress(gain, w, np.eye(model.d1))
    return request.v_init + step * w / np.linalg.norm(w)
