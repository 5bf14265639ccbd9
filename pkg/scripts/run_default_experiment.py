#!/usr/bin/env python3
"""Run the full default experiment: data, two-stage training, baseline,
evaluation, and every analysis instrument.

    python3 scripts/run_default_experiment.py --root runs/exp1 --seed 1

All artifacts land under --root.  The same seed drives data generation and
training, so the whole tree is reproducible byte for byte.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from slp_mnmt import cli
from slp_mnmt.config import default_experiment_config, save_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--beam", type=int, default=1)
    ap.add_argument("--skip-baseline", action="store_true")
    args = ap.parse_args()

    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    corpus = root / "corpus"

    cfg = default_experiment_config()
    cfg = dataclasses.replace(
        cfg,
        paths=dataclasses.replace(cfg.paths, corpus_dir=str(corpus),
                                  output_dir=str(root)),
        data=dataclasses.replace(cfg.data, seed=args.seed),
        train=dataclasses.replace(cfg.train, seed=args.seed),
    )
    cfg_path = root / "experiment.json"
    save_config(cfg, cfg_path)

    stage1 = root / "stage1"
    stage2 = root / "stage2"
    baseline = root / "baseline"
    steps = [
        ["gen-data", "--config", str(cfg_path), "--out", str(corpus)],
        ["train", "--config", str(cfg_path), "--stage", "1", "--out", str(stage1)],
        ["train", "--config", str(cfg_path), "--stage", "2", "--out", str(stage2),
         "--resume", str(stage1 / "stage1-final.ckpt")],
    ]
    if not args.skip_baseline:
        steps.append(["train", "--config", str(cfg_path), "--stage", "baseline",
                      "--out", str(baseline)])
    steps.append(["evaluate", "--ckpt", str(stage2 / "stage2-final.ckpt"),
                  "--data", str(corpus), "--beam", str(args.beam),
                  "--out", str(root / "metrics-stage2")])
    if not args.skip_baseline:
        steps.append(["evaluate", "--ckpt", str(baseline / "baseline-final.ckpt"),
                      "--data", str(corpus), "--beam", str(args.beam),
                      "--out", str(root / "metrics-baseline")])
    # one directory per instrument so each keeps its own manifest
    for what in ("conflicts", "overlap", "selection", "representations"):
        steps.append(["analyze", what, "--ckpt", str(stage2 / "stage2-final.ckpt"),
                      "--data", str(corpus), "--out", str(root / "analysis" / what)])

    for argv in steps:
        print(f"+ slp-mnmt {' '.join(argv)}", flush=True)
        code = cli.main(argv)
        if code != 0:
            return code
    print(f"done: artifacts under {root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
