"""Edit suites, metrics and the verification battery."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Mapping, Optional

import numpy as np

from .memory import (GeometryConfig, SyntheticModel, attach_projectors, forward, gen_model,
                     protected_count, random_orthogonal, random_projector, random_psd, rekey,
                     sample_key)
from .meta import (DivergenceError, EditRequest, build_gate, margin_target, meta_loss_grad_W,
                   metake_run, proxy_update, static_target_baseline, task_losses)
from .solvers import (LayerMemory, allocate_residual, apply_updates, sherman_morrison_inv,
                      solve_closed_form, solve_gradient_oracle, solve_multilayer, solve_projection,
                      edit_objective)
from .spectral import (ball_ellipsoid_gap, regularize_feasibility, spectral_report,
                       static_trap_witness, trap_scan, trust_region_radius)
from .fidelity import (PreconditionError, central_gradient, check_geometry_discrepancy,
                       check_inverse_perturbation, fidelity_report)

__all__ = [
    "MetaParams",
    "BaselineParams",
    "VerifyParams",
    "ExperimentConfig",
    "ResultsRecord",
    "EditFailure",
    "build_request",
    "plan_target",
    "run_experiment",
    "verify_all",
    "emit_results",
    "read_results",
    "aggregate_rows",
    "CSV_HEADER",
]

logger = logging.getLogger(__name__)

METHODS = ("metake", "static_baseline", "ridge_only", "projection_only")
DIFFICULTIES = ("easy", "hard", "mixed")
CSV_HEADER = ["edit_id", "method", "beta", "efficacy", "generalization", "specificity",
              "edit_loss_final", "loc_loss_final"]


class EditFailure(RuntimeError):
    """A solver or optimizer error while processing one edit."""

    def __init__(self, edit_id, cause):
        super().__init__(f"edit {edit_id} failed: {cause}")
        self.edit_id = edit_id
        self.cause = cause


@dataclass(frozen=True)
class MetaParams:
    # hard keys shrink the task gradient by beta, so plain small steps barely
    # move v*; these defaults are tuned for the desk-scale suites
    eta: float = 0.2
    T: int = 15
    reg_weight: float = 1e-2
    optimizer: str = "adam"
    early_stop: bool = True


@dataclass(frozen=True)
class BaselineParams:
    lambda_up: float = 1e-2
    steps: int = 15
    lr: float = 1.0
    margin: float = 1.0  # logit margin asked of the single-shot solver-only plans


@dataclass(frozen=True)
class VerifyParams:
    perturbation_ratio: float = 0.9  # ||E|| / lambda_min(A) for the inverse-perturbation check
    instances: int = 20


_NESTED = {"geometry": GeometryConfig, "metake_params": MetaParams,
           "baseline_params": BaselineParams, "verify_params": VerifyParams}


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    n_edits: int = 10
    edit_difficulty: str = "hard"
    method: str = "metake"
    metake_params: MetaParams = field(default_factory=MetaParams)
    baseline_params: BaselineParams = field(default_factory=BaselineParams)
    paraphrase_count: int = 4
    locality_count: int = 8
    paraphrase_noise: float = 0.05
    seed: int = 0
    verify_params: VerifyParams = field(default_factory=VerifyParams)

    def __post_init__(self):
        if int(self.n_edits) != self.n_edits or self.n_edits < 1:
            raise ValueError("n_edits must be a positive integer")
        if self.edit_difficulty not in DIFFICULTIES:
            raise ValueError(f"edit_difficulty must be one of {DIFFICULTIES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.paraphrase_count < 0 or self.locality_count < 0:
            raise ValueError("key counts must be non-negative")
        if not self.paraphrase_noise >= 0:
            raise ValueError("paraphrase_noise must be non-negative")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.metake_params.optimizer not in ("sgd", "adam"):
            raise ValueError("metake optimizer must be 'sgd' or 'adam'")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        for name, typ in _NESTED.items():
            if name in data and not isinstance(data[name], typ):
                sub = dict(data[name])
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ValueError(f"unknown {name} fields: {sorted(bad)}")
                data[name] = typ(**sub)
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResultsRecord:
    method: str
    efficacy: float
    generalization: float
    specificity: float
    per_edit: List[dict]
    vacuous: dict = field(default_factory=dict)
    config: Optional[dict] = None

    def summary(self) -> dict:
        return {
            "method": self.method,
            "n_edits": len(self.per_edit),
            "efficacy": self.efficacy,
            "generalization": self.generalization,
            "specificity": self.specificity,
            "vacuous": dict(self.vacuous),
            "config": self.config,
        }


# Request construction ----------------------------------------------------------
def _eigbasis(C):
    w, Q = np.linalg.eigh(C)
    order = np.argsort(w)[::-1]
    return w[order], Q[:, order]


def _edit_key(rng, model: SyntheticModel, difficulty, protected_mass, norm):
    _, Q = _eigbasis(model.layers[-1].covariance)
    d0 = model.d0
    if difficulty == "mixed":
        difficulty = "hard" if rng.random() < 0.5 else "easy"
    if difficulty == "hard":
        return sample_key(rng, Q, protected_count(d0), protected_mass, norm), "hard"
    # easy: all energy on the bottom quarter of the spectrum
    n_low = protected_count(d0)
    return sample_key(rng, Q[:, ::-1], n_low, 1.0, norm), "easy"


def _paraphrases(rng, key, count, noise):
    out = []
    nk = np.linalg.norm(key)
    for _ in range(count):
        xi = rng.standard_normal(key.size)
        x = key + noise * nk * xi / np.linalg.norm(xi)
        out.append(x * nk / np.linalg.norm(x))
    return np.array(out).reshape(count, key.size)


def _locality(rng, model, key, count, max_cos=0.1):
    """Keys drawn from the stored-key distribution ``N(0, C_L)``, rescaled to ``||key||``,
    with ``|cos(x, key)| < max_cos``."""
    C = model.layers[-1].covariance
    w, Q = _eigbasis(C)
    root = Q * np.sqrt(np.maximum(w, 0.0))
    nk = np.linalg.norm(key)
    u = key / nk
    out = []
    while len(out) < count:
        x = root @ rng.standard_normal(key.size)
        for _ in range(100):
            if abs(x @ u) < max_cos * np.linalg.norm(x):
                break
            x = root @ rng.standard_normal(key.size)
        else:
            x = x - (x @ u) * u
        out.append(x * nk / np.linalg.norm(x))
    return np.array(out).reshape(count, key.size)


def build_request(model: SyntheticModel, cfg: ExperimentConfig, edit_id: int):
    """Model re-keyed to a fresh edit key, the request, and the edit's difficulty label.

    Deterministic in ``(cfg.seed, edit_id)`` only, so edits can be processed
    in any order.
    """
    rng = np.random.default_rng([cfg.seed, edit_id])
    geo = cfg.geometry
    key, label = _edit_key(rng, model, cfg.edit_difficulty, geo.protected_mass, geo.key_norm)
    edited = rekey(model, key)
    pre = int(np.argmax(forward(edited, key)))
    choices = [c for c in range(edited.V) if c != pre]
    target = int(choices[rng.integers(len(choices))])
    layer_L = edited.layers[-1]
    request = EditRequest(
        edit_key=key,
        target_class=target,
        v_init=layer_L.weight @ layer_L.key,
        paraphrase_keys=_paraphrases(rng, key, cfg.paraphrase_count, cfg.paraphrase_noise),
        locality_keys=_locality(rng, edited, key, cfg.locality_count),
        reg_weight=cfg.metake_params.reg_weight,
    )
    return edited, request, label


def plan_target(model, request, cfg: ExperimentConfig):
    """Target ``v*`` for ``cfg.method`` and an optional :class:`MetaTrace`."""
    if cfg.method == "metake":
        mp = cfg.metake_params
        trace = metake_run(model, request, mp.eta, mp.T, optimizer=mp.optimizer,
                           early_stop=mp.early_stop)
        return trace.final_v_star, trace
    bp = cfg.baseline_params
    if cfg.method == "static_baseline":
        return static_target_baseline(model, request, bp.lambda_up, bp.steps, bp.lr), None
    return margin_target(model, request, bp.margin), None


def _one_edit(model, cfg: ExperimentConfig, edit_id):
    try:
        edited, request, label = build_request(model, cfg, edit_id)
        if cfg.method == "projection_only" and edited.layers[-1].projector is None:
            edited = attach_projectors(edited)
        v_star, trace = plan_target(edited, request, cfg)
        plan = allocate_residual(edited, v_star)
        results = solve_multilayer(edited, plan)
        overrides = apply_updates(edited, results)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as err:
        raise EditFailure(edit_id, err) from err

    key = request.edit_key
    o = request.target_class
    eff = float(np.argmax(forward(edited, key, overrides)) == o)
    para = request.paraphrase_keys
    gen = (float(np.mean([np.argmax(forward(edited, x, overrides)) == o for x in para]))
           if len(para) else 1.0)
    loc = request.locality_keys
    spe = (float(np.mean([np.argmax(forward(edited, x, overrides)) == np.argmax(forward(edited, x))
                          for x in loc])) if len(loc) else 1.0)
    edit_loss, loc_loss = task_losses(edited, overrides, request)
    return {
        "edit_id": edit_id,
        "method": cfg.method,
        "difficulty": label,
        "target_class": o,
        "beta": results[edited.L].beta,
        "efficacy": eff,
        "generalization": gen,
        "specificity": spe,
        "edit_loss_final": edit_loss,
        "loc_loss_final": loc_loss,
        "trace": trace.summary() if trace is not None else None,
    }


def _workers():
    env = os.environ.get("MEMEDIT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _mean(values):
    return float(math.fsum(values) / len(values))


def run_experiment(cfg: ExperimentConfig, model: Optional[SyntheticModel] = None) -> ResultsRecord:
    """Independent-edit protocol: every edit starts from the unedited model.

    Edits run on up to ``MEMEDIT_THREADS`` worker threads; results are
    collected in edit-id order, so the record does not depend on scheduling.
    """
    model = gen_model(cfg.geometry) if model is None else model
    ids = range(cfg.n_edits)
    workers = min(_workers(), cfg.n_edits)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_edit = list(pool.map(lambda i: _one_edit(model, cfg, i), ids))
    else:
        per_edit = [_one_edit(model, cfg, i) for i in ids]
    vacuous = {"generalization": cfg.paraphrase_count == 0, "specificity": cfg.locality_count == 0}
    return ResultsRecord(
        method=cfg.method,
        efficacy=_mean([e["efficacy"] for e in per_edit]),
        generalization=_mean([e["generalization"] for e in per_edit]),
        specificity=_mean([e["specificity"] for e in per_edit]),
        per_edit=per_edit,
        vacuous=vacuous,
        config=cfg.to_dict(),
    )


# Results I/O -------------------------------------------------------------------------
def summary_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".summary.json")


def emit_results(record: ResultsRecord, path) -> Path:
    """Write the per-edit CSV at ``path`` and ``<stem>.summary.json`` next to it."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for e in record.per_edit:
                writer.writerow([e["edit_id"], e["method"]] + [repr(float(e[c])) for c in CSV_HEADER[2:]])
        summary = record.summary()
        if not record.per_edit:
            summary["vacuous"] = {"efficacy": True, "generalization": True, "specificity": True}
        summary_path(path).write_text(json.dumps(summary, indent=2))
    except OSError as err:
        raise OSError(f"cannot write results to {path}: {err}") from err
    return path


def read_results(path) -> List[dict]:
    """Parse a results CSV back into typed rows."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            row = {"edit_id": int(r["edit_id"]), "method": r["method"]}
            row.update({c: float(r[c]) for c in CSV_HEADER[2:]})
            rows.append(row)
    return rows


def aggregate_rows(rows) -> dict:
    """Aggregate fractions recomputed from per-edit rows."""
    if not rows:
        return {"n_edits": 0, "efficacy": 1.0, "generalization": 1.0, "specificity": 1.0,
                "vacuous": {"efficacy": True, "generalization": True, "specificity": True}}
    return {
        "n_edits": len(rows),
        "efficacy": _mean([r["efficacy"] for r in rows]),
        "generalization": _mean([r["generalization"] for r in rows]),
        "specificity": _mean([r["specificity"] for r in rows]),
    }


# Verification battery --------------------------------------------------------------
def _check(name, claim, fn):
    try:
        passed, measured = fn()
        status = "pass" if passed else "fail"
    except PreconditionError as err:
        status, measured = "precondition", {"reason": str(err)}
    except Exception as err:  # reported, not raised: the battery is a report
        status, measured = "fail", {"error": f"{type(err).__name__}: {err}"}
    return {"name": name, "claim": claim, "status": status, "measured": _jsonable(measured)}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def verify_all(cfg: ExperimentConfig) -> dict:
    """Run every hard invariant at the configured dimensions.

    Returns ``{"passed": bool, "checks": [...]}``; each check carries a
    status of ``pass``, ``fail`` or ``precondition`` (hypothesis not met,
    which is not a failure) and the measured quantities.
    """
    geo = cfg.geometry
    model = gen_model(geo)
    rng = np.random.default_rng([cfg.seed, 2**32 - 1])
    n_inst = cfg.verify_params.instances
    d0, d1 = geo.d0, geo.d1
    L = model.layers[-1]
    lam = geo.ridge if geo.ridge > 0 else 1e-2

    def random_layer():
        return LayerMemory(rng.standard_normal((d1, d0)), rng.standard_normal(d0),
                           random_psd(rng, d0, rank=int(rng.integers(1, d0 + 1)), scale=5.0),
                           float(rng.choice([0.1, 1.0, 10.0])))

    def attenuation():
        worst = 0.0
        for _ in range(n_inst):
            layer = random_layer()
            delta = rng.standard_normal(d1)
            res = solve_closed_form(layer, delta)
            err = np.linalg.norm(res.realized_residual - res.gamma / (1 + res.gamma) * delta)
            worst = max(worst, err / np.linalg.norm(delta))
        return worst <= 1e-8, {"max_relative_error": worst}

    def oracle():
        worst_gap, worst_dist = -np.inf, 0.0
        for _ in range(min(n_inst, 5)):
            layer = random_layer()
            delta = rng.standard_normal(d1)
            D = solve_closed_form(layer, delta).delta
            D_gd = solve_gradient_oracle(layer, delta, tol=1e-9)
            worst_gap = max(worst_gap, edit_objective(D, layer, delta) - edit_objective(D_gd, layer, delta))
            worst_dist = max(worst_dist, float(np.linalg.norm(D - D_gd)))
        return worst_gap <= 1e-6 and worst_dist < 1e-4, {"objective_gap": worst_gap, "distance": worst_dist}

    def sherman_morrison():
        worst = 0.0
        for _ in range(n_inst):
            A = random_psd(rng, d0) + np.eye(d0)
            k = rng.standard_normal(d0)
            direct = np.linalg.inv(A + np.outer(k, k))
            sm = sherman_morrison_inv(np.linalg.inv(A), k)
            worst = max(worst, np.linalg.norm(sm - direct) / np.linalg.norm(direct))
        return worst <= 1e-9, {"max_relative_error": worst}

    def projection():
        worst = 0.0
        for _ in range(n_inst):
            P = random_projector(rng, d0, int(rng.integers(0, d0 + 1)))
            layer = LayerMemory(np.zeros((d1, d0)), rng.standard_normal(d0), np.zeros((d0, d0)),
                                float(rng.choice([0.1, 1.0, 10.0])), P)
            delta = rng.standard_normal(d1)
            res = solve_projection(layer, delta)
            pk = P @ layer.key
            beta = pk @ pk / (pk @ pk + layer.ridge)
            worst = max(worst, np.linalg.norm(res.delta @ P @ layer.key - beta * delta) / np.linalg.norm(delta))
        return worst <= 1e-8, {"max_relative_error": worst}

    def suppression():
        rep = spectral_report(L.covariance, L.ridge, L.key)
        s = len(rep.protected_set)
        _, Q = _eigbasis(L.covariance)
        k_in = sample_key(rng, Q, s, 1.0, geo.key_norm)
        rep_in = spectral_report(L.covariance, L.ridge, k_in)
        direct = float(k_in @ np.linalg.solve(L.effective_geometry(), k_in))
        res = solve_closed_form(replace(L, key=k_in), rng.standard_normal(d1))
        ok = (rep_in.beta <= rep_in.suppression_upper_bound + 1e-10
              and abs(rep_in.gamma - direct) <= 1e-10 * max(1.0, direct)
              and abs(rep_in.beta - res.beta) <= 1e-10)
        return ok, {"beta_model_key": rep.beta, "beta_protected_key": rep_in.beta,
                    "bound": rep_in.suppression_upper_bound, "protected_mass": rep.protected_mass}

    def trust_region():
        A = regularize_feasibility(L.covariance)
        gap = ball_ellipsoid_gap(A)
        w, Q = _eigbasis(A)
        tau = 1.0
        # inscribed ball inside F(tau); e_min boundary point on its boundary
        U = rng.standard_normal((1000, d0))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        r_in = math.sqrt(tau / w[0]) * (1 - 1e-9)
        inside = np.all(np.einsum("ij,jk,ik->i", r_in * U, A, r_in * U) <= tau)
        p = math.sqrt(tau / w[-1]) * Q[:, -1]
        on_boundary = abs(p @ A @ p - tau) <= 1e-9
        H = random_psd(rng, d0)
        g = rng.standard_normal(d0)
        radii = [trust_region_radius(H, g, x) for x in (0.1, 1.0, 10.0, 100.0)]
        mono = all(b <= a for a, b in zip(radii, radii[1:]))
        return bool(inside and on_boundary and mono), {"gap": gap, "radii": radii}

    def static_trap():
        A = regularize_feasibility(L.covariance)
        w = np.linalg.eigvalsh(A)
        tau = 1.0
        cases = []
        ok = True
        # progress demanded along e_min as a fraction of the ellipsoid's extent there
        for frac in (0.5, 0.9):
            m = frac * math.sqrt(tau / w[0])
            wit = static_trap_witness(w[0], w[-1], tau, 1.0, 1.0, m)
            hits = trap_scan(wit)
            ok &= wit.feasible or hits.size == 0
            cases.append({"m": m, "feasible": wit.feasible, "scan_hits": int(hits.size),
                          "easy_max": wit.easy_interval[1], "hard_min": wit.hard_interval[0]})
        return ok, {"kappa": w[-1] / w[0], "cases": cases}

    edited, request, _ = build_request(model, cfg, 0)

    def meta_gradient():
        W = edited.layers[-1].weight + 0.1 * rng.standard_normal((d1, d0))
        worst = 0.0
        for terms in (("edit",), ("loc",)):
            G = meta_loss_grad_W(edited, W, request, terms)

            def f(flat, terms=terms):
                from .meta import meta_loss
                ml = meta_loss(edited, flat.reshape(d1, d0), request)
                return ml.edit_loss if terms == ("edit",) else ml.loc_loss
            G_fd = central_gradient(f, W.ravel(), 1e-5).reshape(d1, d0)
            scale = max(np.linalg.norm(G_fd), 1e-12)
            worst = max(worst, np.linalg.norm(G - G_fd) / scale)
        return worst < 1e-5, {"max_relative_error": worst}

    def gate():
        layer = edited.layers[-1]
        gt = build_gate(layer, edited.L)
        rep = spectral_report(layer.covariance, layer.ridge, layer.key) if layer.projector is None else None
        v = request.v_init + rng.standard_normal(d1)
        realized = proxy_update(v, layer, gt) @ layer.key
        res = solve_closed_form(layer, v - request.v_init) if layer.projector is None else \
            solve_projection(layer, v - request.v_init)
        ok = np.linalg.norm(realized - res.realized_residual) <= 1e-8 * max(1.0, np.linalg.norm(realized))
        if rep is not None:
            ok &= abs(gt.beta - rep.beta) <= 1e-10
        return bool(ok), {"beta": gt.beta}

    def inverse_perturbation():
        A = random_psd(rng, d0) + np.eye(d0)
        mu = np.linalg.eigvalsh(A)[0]
        E = rng.standard_normal((d0, d0))
        E = (E + E.T) / 2
        E *= cfg.verify_params.perturbation_ratio * mu / np.linalg.norm(E, 2)
        out = check_inverse_perturbation(A, E)
        return out["holds"], out

    def discrepancy():
        out = check_geometry_discrepancy(model)
        ok = out.max_discrepancy <= out.two_term_bound + 1e-12
        if out.eps_C == 0 and out.eps_k == 0:
            ok &= out.max_discrepancy <= 1e-12
        return ok, out.to_dict()

    def fidelity():
        flat = gen_model(replace(geo, eps_C=0.0, eps_k=0.0, projector=False))
        m2, req2, _ = build_request(flat, cfg, 1)
        v = req2.v_init + 0.5 * rng.standard_normal(d1)
        rep = fidelity_report(m2, req2, v, scheme="last")
        ok = rep.inner_product > 0 and np.linalg.norm(rep.g_proxy) <= rep.s_L_norm * rep.gate_norm + 1e-12
        return ok, {"cosine": rep.cosine, "rho": rep.rho, "alpha": rep.alpha,
                    "inner_product": rep.inner_product}

    battery = [
        ("attenuation_law", "realized residual = gamma/(1+gamma) * requested residual", attenuation),
        ("closed_form_optimality", "closed form matches gradient-descent oracle", oracle),
        ("sherman_morrison", "rank-one inverse update matches dense inverse", sherman_morrison),
        ("projection_attenuation", "projected editor attenuates by |Pk|^2/(|Pk|^2+lambda)", projection),
        ("spectral_suppression", "protected keys obey the suppression bound", suppression),
        ("penalty_trust_region", "radius monotone in lambda; ball/ellipsoid inclusions", trust_region),
        ("static_trap", "no shared isotropic penalty when intervals are disjoint", static_trap),
        ("meta_gradient", "analytic meta-loss gradient matches finite differences", meta_gradient),
        ("structural_gate", "gate look-ahead equals the closed-form editor", gate),
        ("inverse_perturbation", "||B^-1 - A^-1|| <= eps/(mu(mu-eps))", inverse_perturbation),
        ("geometry_discrepancy", "||M_l - M_L|| within the two-term drift bound", discrepancy),
        ("proxy_descent", "<g_true, g_proxy> > 0 without drift, allocation at L", fidelity),
    ]
    checks = [_check(name, claim, fn) for name, claim, fn in battery]
    return {"passed": all(c["status"] != "fail" for c in checks), "checks": checks,
            "config": cfg.to_dict()}
