"""Run the desk-scale experiment pipeline end to end through the CLI.

    python scripts/desk_experiments.py --out runs/desk
    python scripts/desk_experiments.py --out runs/quick --only probe

Steps: MAP ReLU and slope -0.5 nets on 600 MNIST digits and their likelihood
surveys, the MFVI slope sweep, the decalibration curves and the final report.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from leakybnn.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
STEPS = ("probe", "sweep", "decal", "report")


def run(*argv) -> None:
    argv = [str(a) for a in argv]
    print("$ leakybnn " + " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def probe_step(out: Path) -> None:
    cfg = CONFIGS / "probe_mnist600.cfg"
    for alpha in (0.0, -0.5):
        d = out / f"probe_a{alpha:+.1f}"
        run("train", "--config", cfg, "--mode", "map", "--out", d, f"train.alpha={alpha}")
        ckpt = next(d.glob("*.ckpt"))
        run("probe", "--config", cfg, "--checkpoint", ckpt, "--out", d / "survey", f"train.alpha={alpha}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "desk")
    ap.add_argument("--only", choices=STEPS, action="append", help="run only these steps (repeatable)")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)
    steps = args.only or STEPS
    if "probe" in steps:
        probe_step(args.out)
    if "sweep" in steps:
        run("sweep", "--config", CONFIGS / "sweep_mnist_desk.cfg", "--out", args.out / "sweep", "--jobs", args.jobs)
    if "decal" in steps:
        run("decal", "--config", CONFIGS / "decal_mnist_desk.cfg", "--out", args.out / "decal", "--jobs", args.jobs)
    if "report" in steps:
        run("report", args.out / "sweep" / "sweep.csv", "--out", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
