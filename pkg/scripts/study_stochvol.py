"""Stochastic volatility model: transport MLMC against PaRIS at matched operation cost.

The reference is an FFBS run with 2^13 particles on the same record.
"""

from _common import parse, run_and_report

from mlsmooth.bench import ExperimentConfig


def main():
    args = parse(__doc__, "study_stochvol.csv")
    config = ExperimentConfig(
        model="stoch-vol",
        methods=("transport-mlmc", "paris"),
        epsilons=tuple(args.epsilons),
        match_cost=True,
        replicates=args.replicates,
        n_cap=50,
        reference="ffbs",
        reference_particles=2**13,
        workers=args.workers,
        output=args.output,
    )
    run_and_report(config)


if __name__ == "__main__":
    main()
