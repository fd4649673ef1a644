"""Generate data, train, evaluate and analyze, all through the command line entry point.

    python3 demos/small_pipeline.py [WORK_DIR] [STEPS]

Six synthetic persons; person 5 is held out.  With the default 150 steps
this takes a couple of minutes on one core and the held-out error is still
far from converged, which is fine for a walkthrough.
"""
import csv
import sys
from pathlib import Path

from gazenet.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else "small_pipeline")
steps = sys.argv[2] if len(sys.argv) > 2 else "150"


def run(*argv):
    print("$ gazenet", " ".join(argv))
    code = main(list(argv))
    if code:
        sys.exit(code)


run("gen-data", "--out", str(work / "data"), "--persons", "6", "--per-person", "60", "--seed", "0")
run("train", "--data", str(work / "data"), "--preset", "desk", "--seed", "0", "--steps", steps,
    "--holdout-person", "5", "--out", str(work / "run"))

with open(work / "run" / "losses.csv", newline="") as f:
    losses = list(csv.DictReader(f))
for row in losses[:: max(1, len(losses) // 5)] + losses[-1:]:
    print(f"step {row['step']:>4}  gaze {float(row['gaze']):.4f}  gazemap {float(row['gazemap']):.4f}")

with open(work / "run" / "eval.csv", newline="") as f:
    errors = [float(r["error_deg"]) for r in csv.DictReader(f)]
print(f"held-out person 5: {len(errors)} samples, mean error {sum(errors) / len(errors):.2f} deg")

# 60 records cannot fill the default 200-record window
run("analyze", "--eval", str(work / "run" / "eval.csv"), "--out", str(work / "curves"), "--window", "20",
    "--stride", "5", "--mad", "2.0")
for path in sorted((work / "curves").glob("robustness_*.csv")):
    with open(path, newline="") as f:
        points = list(csv.DictReader(f))
    print(f"{path.stem:>26}: {len(points)} points, error {float(points[0]['mean_error_deg']):.2f}"
          f" -> {float(points[-1]['mean_error_deg']):.2f} deg")
