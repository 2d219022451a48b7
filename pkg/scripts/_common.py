"""Helpers shared by the figure scripts."""

from __future__ import annotations

import argparse
import json
import os

from mlsmooth.bench import ExperimentConfig, run_study, summarize

EPSILONS = (0.02, 0.01, 0.005, 0.002, 0.001)


def parse(description: str, default_out: str):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--replicates", "-M", type=int, default=100)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--epsilons", type=float, nargs="+", default=list(EPSILONS))
    args = p.parse_args()
    args.output = os.path.join(args.out_dir, default_out)
    return args


def run_and_report(config: ExperimentConfig) -> list[dict]:
    records = run_study(config, progress=print)
    summary = summarize(records)
    for s in summary:
        print(json.dumps(s))
    print(f"wrote {config.output}")
    return summary
