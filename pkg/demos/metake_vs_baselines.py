"""Compare target planners on a suite of hard edits.

Run: python3 demos/metake_vs_baselines.py
"""
from dataclasses import replace

from memedit import ExperimentConfig, GeometryConfig, gen_model, run_experiment

geometry = GeometryConfig(kappa=1e4, protected_mass=0.99, ridge=1e-3)
base = ExperimentConfig(geometry=geometry, n_edits=50, edit_difficulty="hard", seed=0)
model = gen_model(geometry)

print(f"{'method':>16} {'efficacy':>9} {'general.':>9} {'specif.':>9}")
for method in ("metake", "static_baseline", "ridge_only", "projection_only"):
    rec = run_experiment(replace(base, method=method), model)
    print(f"{method:>16} {rec.efficacy:9.2f} {rec.generalization:9.2f} {rec.specificity:9.2f}")
