"""A ridge weight that works for easy edits and hard edits at once may not exist.

Run: python3 demos/static_trap.py
"""
from memedit import static_trap_witness, trap_scan

for b in (1.0, 0.3):
    w = static_trap_witness(lambda_min=1.0, lambda_max=100.0, tau=1.0, a=1.0, b=b, m=0.2)
    hits = trap_scan(w, n=10_000)
    print(f"b={b}: easy needs lambda <= {w.easy_interval[1]:g}, hard needs lambda >= {w.hard_interval[0]:g}")
    if hits.size:
        print(f"  feasible, {hits.size} of 10000 scanned values work, e.g. [{hits.min():.3g}, {hits.max():.3g}]")
    else:
        print("  no single lambda serves both")
