"""Linear-Gaussian model: transport MLMC against PaRIS at matched operation cost.

MSE is measured against the RTS smoother of the full record.
"""

from _common import parse, run_and_report

from mlsmooth.bench import ExperimentConfig


def main():
    args = parse(__doc__, "study_linear_gaussian.csv")
    config = ExperimentConfig(
        model="linear-gaussian",
        methods=("transport-mlmc", "paris"),
        epsilons=tuple(args.epsilons),
        match_cost=True,
        replicates=args.replicates,
        n_cap=25,
        workers=args.workers,
        output=args.output,
    )
    run_and_report(config)


if __name__ == "__main__":
    main()
