"""Allen-Cahn with a plain GP smoothing the PINN's labels, run through the CLI layer.

This is the small shipped configuration; the full-size experiment is
``pilabel run exp_pinn_gp_ac``.  Artifacts land in ./runs/demo.
"""
import csv

from pilabel.cli import run_experiment, shipped_config_path

report = run_experiment(shipped_config_path("smoke_allen_cahn_bootstrap"), "runs/demo")
for row in report.rounds:
    print(f"round {row['round']}: {row['n_pd_self']:3d} labels, l2 {row['pinn_l2_rel']:.3e}")
print("verdict:", {k: report.verdict[k] for k in ("l2_rel_last", "beats_baseline")})
print("baseline with the same step count:", report.verdict["baseline"])

last = report.rounds[-1]["round"]
with open(f"runs/demo/smoke_allen_cahn_bootstrap/snapshot_round{last:02d}.csv") as fh:
    rows = [r for r in csv.DictReader(fh) if r["tag"] == "PD"]
print(f"{len(rows)} GP labels held in round {last}", "e.g. " + str(rows[0]) if rows else "")
