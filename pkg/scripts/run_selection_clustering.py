#!/usr/bin/env python3
"""Train stage 1 on the clustering workload and report which pool module
each language selects.

    python3 scripts/run_selection_clustering.py --root runs/cluster --seed 1

The workload pairs two languages with identical substitution tables against
two with disjoint ones (see clustering_experiment_config).  The printed
report shows the selection weights per language; related languages are
expected to co-select a module.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from slp_mnmt import cli
from slp_mnmt.config import clustering_experiment_config, save_config
from slp_mnmt.eval_analysis import selection_report
from slp_mnmt.training import load_checkpoint


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    corpus = root / "corpus"

    cfg = clustering_experiment_config()
    cfg = dataclasses.replace(
        cfg,
        paths=dataclasses.replace(cfg.paths, corpus_dir=str(corpus),
                                  output_dir=str(root)),
        data=dataclasses.replace(cfg.data, seed=args.seed),
        train=dataclasses.replace(cfg.train, seed=args.seed),
    )
    cfg_path = root / "experiment.json"
    save_config(cfg, cfg_path)

    for argv in (
        ["gen-data", "--config", str(cfg_path), "--out", str(corpus)],
        ["train", "--config", str(cfg_path), "--stage", "1",
         "--out", str(root / "stage1")],
    ):
        print(f"+ slp-mnmt {' '.join(argv)}", flush=True)
        code = cli.main(argv)
        if code != 0:
            return code

    params, _, _, _ = load_checkpoint(root / "stage1" / "stage1-final.ckpt")
    report = selection_report(params)
    print(json.dumps(report, indent=2))
    chosen = {r["language"]: r["module"] for r in report if r["tier"] == "high"}
    same = chosen["pa"] == chosen["pb"]
    apart = chosen["pc"] != chosen["pa"] or chosen["pd"] != chosen["pa"]
    print(f"identical-table pair co-selects: {same}")
    print(f"a disjoint-table language selects the other module: {apart}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
