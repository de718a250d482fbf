"""How far the one-layer gate gradient drifts from the true hypergradient.

With a single edited layer (or all residual on the last layer) and identical
layer geometry the proxy is exact; spreading the residual over layers whose
covariances and keys drift apart opens a gap that grows with the drift.

Run: python3 demos/proxy_fidelity.py
"""
import numpy as np

from memedit import ExperimentConfig, GeometryConfig, fidelity_report, gen_model
from memedit.harness import build_request

print(f"{'drift':>6} {'scheme':>8} {'cosine':>8} {'|g_true - g_proxy|':>20}")
for drift in (0.0, 0.01, 0.02, 0.04, 0.08):
    geo = GeometryConfig(d0=8, d1=6, V=5, kappa=100.0, eps_C=drift / 2, eps_k=drift / 2)
    cfg = ExperimentConfig(geometry=geo, locality_count=4, paraphrase_count=0)
    model, req, _ = build_request(gen_model(geo), cfg, 0)
    v = req.v_init + np.random.default_rng(0).standard_normal(geo.d1)
    for scheme in ("last", "uniform"):
        rep = fidelity_report(model, req, v, scheme=scheme)
        print(f"{drift:6.2f} {scheme:>8} {rep.cosine:8.4f} {rep.error_norm:20.3e}")
