"""Cost against epsilon for both models, with the fit ``cost = -a eps^-2 - b log(eps)``.

Reads the CSVs written by the other two scripts when present, otherwise runs
the transport method alone.
"""

import json
import os

from _common import parse

from mlsmooth.bench import ExperimentConfig, fit_cost, loglog_slope, read_csv, run_study, summarize


def main():
    args = parse(__doc__, "study_cost.csv")
    fits = {}
    for model, n_cap, name in (("linear-gaussian", 25, "study_linear_gaussian.csv"), ("stoch-vol", 50, "study_stochvol.csv")):
        path = os.path.join(args.out_dir, name)
        if os.path.exists(path):
            records = read_csv(path)
        else:
            config = ExperimentConfig(
                model=model, methods=("transport-mlmc",), epsilons=tuple(args.epsilons), replicates=args.replicates,
                n_cap=n_cap, workers=args.workers, output=path,
            )
            records = run_study(config)
        rows = [s for s in summarize(records) if s["method"] == "transport-mlmc"]
        eps = [s["epsilon"] for s in rows]
        cost = [s["cost_ops"] for s in rows]
        fits[model] = {
            "epsilon": eps,
            "cost_ops": cost,
            "fit": fit_cost(eps, cost),
            "loglog": loglog_slope(eps, cost),
        }
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "study_cost.json"), "w") as fh:
        json.dump(fits, fh, indent=2)
    print(json.dumps(fits, indent=2))


if __name__ == "__main__":
    main()
