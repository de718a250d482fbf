"""Synthetic multi-layer linear associative memories.

A model is a stack of value-writing matrices ``W_l`` that all read the same
input key and write into a shared residual stream, followed by a linear
readout to class logits::

    logits = U @ (h0 + sum_l W_l @ key)

Each layer also carries the statistics a least-squares editor needs: the
frozen key ``k_l`` of the fact being edited, the uncentered covariance
``C_l`` of previously stored keys, a ridge coefficient and (optionally) an
orthogonal projector onto the editable subspace.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "LayerMemory",
    "SyntheticModel",
    "GeometryConfig",
    "gen_model",
    "forward",
    "hidden_state",
    "covariance_of",
    "rekey",
    "protected_count",
    "sample_key",
    "nullspace_projector",
    "attach_projectors",
    "random_orthogonal",
    "random_psd",
    "random_projector",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

_SYM_TOL = 1e-12
_PSD_TOL = 1e-10
_PROJ_TOL = 1e-10


def _frozen(a, ndim=None):
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerMemory:
    """One editable layer: weight, frozen edit key and preservation geometry.

    ``ridge`` doubles as the isotropic coefficient when ``projector`` is set.
    """

    weight: np.ndarray
    key: np.ndarray
    covariance: np.ndarray
    ridge: float = 0.0
    projector: Optional[np.ndarray] = None

    def __post_init__(self):
        W = _frozen(self.weight, 2)
        k = _frozen(self.key, 1)
        C = _frozen(self.covariance, 2)
        d1, d0 = W.shape
        if k.shape != (d0,):
            raise ValueError(f"key has length {k.size}, weight expects {d0}")
        if C.shape != (d0, d0):
            raise ValueError(f"covariance shape {C.shape} != ({d0}, {d0})")
        if not np.all(np.isfinite(W)) or not np.all(np.isfinite(C)) or not np.all(np.isfinite(k)):
            raise ValueError("layer arrays must be finite")
        if np.max(np.abs(C - C.T), initial=0.0) > _SYM_TOL:
            raise ValueError("covariance is not symmetric")
        if d0 and np.linalg.eigvalsh(C)[0] < -_PSD_TOL:
            raise ValueError("covariance has a negative eigenvalue")
        ridge = float(self.ridge)
        if not ridge >= 0.0:
            raise ValueError(f"ridge must be non-negative, got {self.ridge}")
        P = None
        if self.projector is not None:
            P = _frozen(self.projector, 2)
            if P.shape != (d0, d0):
                raise ValueError(f"projector shape {P.shape} != ({d0}, {d0})")
            if np.linalg.norm(P @ P - P) > _PROJ_TOL or np.linalg.norm(P - P.T) > _PROJ_TOL:
                raise ValueError("projector is not a symmetric idempotent matrix")
        object.__setattr__(self, "weight", W)
        object.__setattr__(self, "key", k)
        object.__setattr__(self, "covariance", C)
        object.__setattr__(self, "ridge", ridge)
        object.__setattr__(self, "projector", P)

    @property
    def d0(self) -> int:
        return self.weight.shape[1]

    @property
    def d1(self) -> int:
        return self.weight.shape[0]

    def effective_geometry(self) -> np.ndarray:
        """``C + ridge * I``."""
        return self.covariance + self.ridge * np.eye(self.d0)


@dataclass(frozen=True)
class GeometryConfig:
    """Dials for :func:`gen_model`.

    ``kappa`` is the condition number of the last layer's key covariance,
    ``protected_mass`` the share of the edit key's energy placed in its
    top-eigenvalue subspace, and ``eps_C`` / ``eps_k`` the spectral-norm and
    Euclidean drift of every other layer's covariance and key relative to
    the last layer.
    """

    d0: int = 16
    d1: int = 16
    V: int = 8
    n_layers: int = 3
    kappa: float = 100.0
    protected_mass: float = 0.5
    eps_C: float = 0.0
    eps_k: float = 0.0
    seed: int = 0
    ridge: float = 1e-2
    key_norm: float = 10.0
    projector: bool = False

    def __post_init__(self):
        for name in ("d0", "d1", "V", "n_layers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.V < 2:
            raise ValueError("V must be at least 2")
        if not self.kappa >= 1.0 or not math.isfinite(self.kappa):
            raise ValueError(f"kappa must be a finite value >= 1, got {self.kappa}")
        if not 0.0 <= self.protected_mass <= 1.0:
            raise ValueError(f"protected_mass must lie in [0, 1], got {self.protected_mass}")
        if not (self.eps_C >= 0.0 and self.eps_k >= 0.0):
            raise ValueError("drift magnitudes must be non-negative")
        if not self.ridge >= 0.0:
            raise ValueError("ridge must be non-negative")
        if not self.key_norm > 0.0:
            raise ValueError("key_norm must be positive")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.d0 == 1 and self.kappa != 1.0:
            raise ValueError("a one-dimensional key space cannot have kappa > 1")

    @classmethod
    def from_dict(cls, data: Mapping) -> "GeometryConfig":
        return cls(**dict(data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SyntheticModel:
    layers: tuple
    readout: np.ndarray
    base_hidden: np.ndarray
    config: Optional[GeometryConfig] = field(default=None)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        U = _frozen(self.readout, 2)
        h0 = _frozen(self.base_hidden, 1)
        d1, d0 = layers[0].weight.shape
        for i, layer in enumerate(layers):
            if layer.weight.shape != (d1, d0):
                raise ValueError(f"layer {i} has shape {layer.weight.shape}, expected {(d1, d0)}")
        if U.shape[1] != d1 or U.shape[0] < 2:
            raise ValueError(f"readout shape {U.shape} incompatible with d1={d1} (need V >= 2)")
        if h0.shape != (d1,):
            raise ValueError(f"base_hidden has shape {h0.shape}, expected ({d1},)")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "readout", U)
        object.__setattr__(self, "base_hidden", h0)

    @property
    def L(self) -> int:
        """Index of the final layer."""
        return len(self.layers) - 1

    @property
    def d0(self) -> int:
        return self.layers[0].d0

    @property
    def d1(self) -> int:
        return self.layers[0].d1

    @property
    def V(self) -> int:
        return self.readout.shape[0]

    def with_layers(self, layers: Sequence[LayerMemory]) -> "SyntheticModel":
        return replace(self, layers=tuple(layers))


def hidden_state(model: SyntheticModel, key, overrides: Optional[Mapping[int, np.ndarray]] = None):
    """Residual stream ``h0 + sum_l W_l key`` with optional weight overrides."""
    key = np.asarray(key, dtype=float)
    if key.shape != (model.d0,):
        raise ValueError(f"key has shape {key.shape}, model expects ({model.d0},)")
    overrides = overrides or {}
    for idx in overrides:
        if not 0 <= idx < len(model.layers):
            raise ValueError(f"override for unknown layer {idx}")
    h = model.base_hidden.copy()
    for l, layer in enumerate(model.layers):
        W = overrides.get(l, layer.weight)
        if np.shape(W) != layer.weight.shape:
            raise ValueError(f"override for layer {l} has shape {np.shape(W)}")
        h += W @ key
    return h


def forward(model: SyntheticModel, key, overrides: Optional[Mapping[int, np.ndarray]] = None):
    """Class logits ``U (h0 + sum_l W_l key)``; the model is not modified."""
    return model.readout @ hidden_state(model, key, overrides)


def covariance_of(keys) -> np.ndarray:
    """Uncentered second moment ``sum_i k_i k_i^T`` of the rows of ``keys``."""
    K = np.atleast_2d(np.asarray(keys, dtype=float))
    if K.size == 0 or K.shape[0] == 0:
        raise ValueError("covariance_of needs at least one key")
    C = K.T @ K
    return (C + C.T) / 2


# Random building blocks ------------------------------------------------------
def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def random_psd(rng, d, rank=None, scale=1.0):
    """Random PSD matrix ``G G^T`` of the given rank."""
    rank = d if rank is None else rank
    G = rng.standard_normal((d, rank)) * np.sqrt(scale / max(rank, 1))
    C = G @ G.T
    return (C + C.T) / 2


def random_projector(rng, d, rank):
    """Orthogonal projector onto a random ``rank``-dimensional subspace."""
    if rank == 0:
        return np.zeros((d, d))
    Q = random_orthogonal(rng, d)[:, :rank]
    P = Q @ Q.T
    return (P + P.T) / 2


def protected_count(d0: int, fraction: float = 0.25) -> int:
    """Size of the protected (top-eigenvalue) index set."""
    return min(d0, max(1, math.ceil(fraction * d0 - 1e-12)))


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def sample_key(rng, basis, n_top, protected_mass, norm=1.0):
    """Key with ``protected_mass`` of its energy on the first ``n_top`` columns of ``basis``.

    The remainder sits in the span of the other columns. ``basis`` must have
    orthonormal columns ordered by decreasing eigenvalue.
    """
    d0 = basis.shape[0]
    top = basis[:, :n_top] @ _unit(rng, n_top)
    if n_top < basis.shape[1]:
        rest = basis[:, n_top:] @ _unit(rng, basis.shape[1] - n_top)
    else:
        if protected_mass < 1.0:
            raise ValueError("no complement subspace to place the unprotected mass in")
        rest = np.zeros(d0)
    return norm * (np.sqrt(protected_mass) * top + np.sqrt(1.0 - protected_mass) * rest)


def _sorted_eigh(C):
    w, Q = np.linalg.eigh(C)
    order = np.argsort(w)[::-1]
    return w[order], Q[:, order]


def nullspace_projector(covariance, fraction=0.25):
    """Projector onto the complement of the top ``fraction`` eigendirections."""
    d0 = covariance.shape[0]
    _, Q = _sorted_eigh(covariance)
    S = Q[:, : protected_count(d0, fraction)]
    P = np.eye(d0) - S @ S.T
    return (P + P.T) / 2


def attach_projectors(model: SyntheticModel, fraction=0.25) -> SyntheticModel:
    """Copy of ``model`` whose layers execute through null-space projectors."""
    layers = [replace(layer, projector=nullspace_projector(layer.covariance, fraction))
              for layer in model.layers]
    return model.with_layers(layers)


def rekey(model: SyntheticModel, key) -> SyntheticModel:
    """Move the final layer's frozen key to ``key``, keeping every layer's key drift."""
    key = np.asarray(key, dtype=float)
    k_L = model.layers[-1].key
    layers = [replace(layer, key=key + (layer.key - k_L)) for layer in model.layers]
    return model.with_layers(layers)


# Generator ---------------------------------------------------------------------
def gen_model(cfg: GeometryConfig) -> SyntheticModel:
    """Build a model whose last layer realizes the geometry requested in ``cfg``.

    The last layer's covariance is ``Q diag(s) Q^T`` with ``s`` log-uniform in
    ``[1, kappa]`` (both endpoints pinned). Earlier layers add a symmetric
    perturbation of spectral norm exactly ``eps_C`` and a key offset of norm
    exactly ``eps_k``. All random draws happen in a fixed order, so two configs
    differing only in drift magnitudes share every direction.
    """
    rng = np.random.default_rng(cfg.seed)
    d0, d1, V, n = cfg.d0, cfg.d1, cfg.V, cfg.n_layers

    Q = random_orthogonal(rng, d0)
    if d0 == 1:
        spectrum = np.array([1.0])
    else:
        interior = np.exp(rng.uniform(0.0, math.log(cfg.kappa), d0 - 2))
        spectrum = np.sort(np.concatenate([[cfg.kappa], interior, [1.0]]))[::-1]
    C_L = (Q * spectrum) @ Q.T
    C_L = (C_L + C_L.T) / 2

    n_top = protected_count(d0)
    k_L = sample_key(rng, Q, n_top, cfg.protected_mass, cfg.key_norm)

    # stored values W k have roughly unit norm whatever the key scale
    weights = [rng.standard_normal((d1, d0)) / (np.sqrt(d0) * cfg.key_norm) for _ in range(n)]
    if V <= d1:
        Qr, Rr = np.linalg.qr(rng.standard_normal((d1, V)))
        U = (Qr * np.sign(np.diag(Rr))).T
    else:
        U = rng.standard_normal((V, d1))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
    h0 = 0.1 * rng.standard_normal(d1)

    layers = []
    for l in range(n):
        E = rng.standard_normal((d0, d0))
        E = (E + E.T) / 2
        E /= np.linalg.norm(E, 2)
        offset = _unit(rng, d0)
        if l == n - 1:
            C, k = C_L, k_L
        else:
            C = C_L + cfg.eps_C * E
            C = (C + C.T) / 2
            k = k_L + cfg.eps_k * offset
            if np.linalg.eigvalsh(C)[0] < -_PSD_TOL:
                raise ValueError(f"eps_C={cfg.eps_C} drives layer {l}'s covariance indefinite")
        P = nullspace_projector(C) if cfg.projector else None
        layers.append(LayerMemory(weights[l], k, C, cfg.ridge, P))
    return SyntheticModel(tuple(layers), U, h0, cfg)


# Serialization -------------------------------------------------------------------
def model_to_dict(model: SyntheticModel) -> dict:
    layers = []
    for layer in model.layers:
        entry = {
            "weight": layer.weight.tolist(),
            "key": layer.key.tolist(),
            "covariance": layer.covariance.tolist(),
            "ridge": layer.ridge,
        }
        if layer.projector is not None:
            entry["projector"] = layer.projector.tolist()
        layers.append(entry)
    return {
        "dims": {"d0": model.d0, "d1": model.d1, "V": model.V, "n_layers": len(model.layers)},
        "layers": layers,
        "readout": model.readout.tolist(),
        "base_hidden": model.base_hidden.tolist(),
        "config": None if model.config is None else model.config.to_dict(),
    }


def model_from_dict(data: Mapping) -> SyntheticModel:
    layers = [
        LayerMemory(
            np.array(entry["weight"], dtype=float),
            np.array(entry["key"], dtype=float),
            np.array(entry["covariance"], dtype=float),
            float(entry["ridge"]),
            None if entry.get("projector") is None else np.array(entry["projector"], dtype=float),
        )
        for entry in data["layers"]
    ]
    cfg = data.get("config")
    model = SyntheticModel(
        tuple(layers),
        np.array(data["readout"], dtype=float),
        np.array(data["base_hidden"], dtype=float),
        None if cfg is None else GeometryConfig.from_dict(cfg),
    )
    dims = data.get("dims")
    if dims and (dims["d0"], dims["d1"], dims["V"], dims["n_layers"]) != (
        model.d0, model.d1, model.V, len(model.layers)
    ):
        raise ValueError(f"dims header {dims} does not match the stored arrays")
    return model


def save_model(model: SyntheticModel, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips.
    Path(path).write_text(json.dumps(model_to_dict(model), allow_nan=False))


def load_model(path) -> SyntheticModel:
    return model_from_dict(json.loads(Path(path).read_text()))
