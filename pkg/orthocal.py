"""
OrthoCal - command-line replication driver

    python orthocal.py run --config config/model1_gp.env
    python orthocal.py bench --model model1 --prior gp --projection functional --reps 100 --seed 7 --out results/
    python orthocal.py density --chain results/chain_0.csv --out density.csv
    python orthocal.py loss --model bivariate --out loss.csv
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / "src"))

from core.calibrate import PRIORS, PROJECTIONS, Chain, emit_loss_profile
from core.errors import ConfigurationError, ExperimentError, OrthocalError
from core.experiment import MODELS, ExperimentConfig, emit_density_data, run_experiment
from core.numerics import gauss_legendre_rule
from core.reference_models import REFERENCE_MODELS

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_WARNINGS = 3


def _cap_workers(requested: int) -> int:
    cap = os.getenv("ORTHOCAL_THREADS")
    if cap is None or cap.strip() == "":
        return requested
    try:
        return max(1, min(requested, int(cap)))
    except ValueError:
        raise ConfigurationError(f"ORTHOCAL_THREADS must be an integer, got {cap!r}")


def _execute(config: ExperimentConfig, args) -> int:
    config = dataclasses.replace(config, workers=_cap_workers(config.workers))
    record = run_experiment(config, progress=args.progress, verbose=True,
                            compare_outcomes=args.compare_outcomes)

    print("\n" + "=" * 60)
    print(record.table_frame().to_string(index=False))
    print("=" * 60)
    agg = record.aggregate()
    if "joint_tighter_fraction" in agg:
        print(f"🔗 Joint SD below outcome-2 SD in {agg['joint_tighter_fraction']:.0%} of replications")
        print(f"🔗 Mean joint posterior mass in [3.4, 3.7]: {agg['joint_mass_mean']:.3f}")

    if record.failures:
        print(f"❌ {record.failures} replication(s) failed; see replications.csv")
        return EXIT_FAILED
    categories = record.warning_categories
    if categories:
        print(f"⚠️  Warnings raised: {', '.join(categories)}")
        if args.strict:
            return EXIT_WARNINGS
    print("✅ Done")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {}
    if args.out:
        overrides["output_dir"] = args.out
    if args.workers:
        overrides["workers"] = args.workers
    config = ExperimentConfig.from_file(args.config, **overrides)
    return _execute(config, args)


def cmd_bench(args) -> int:
    config = ExperimentConfig(
        model=args.model,
        prior=args.prior,
        projection=args.projection,
        n=args.n,
        sigma=args.sigma,
        iters=args.iters,
        burnin=args.burnin,
        replications=args.reps,
        seed=args.seed,
        output_dir=args.out,
        workers=args.workers or 1,
        diagnostics=args.diagnostics,
    )
    return _execute(config, args)


def cmd_density(args) -> int:
    chain = Chain.from_frame(pd.read_csv(args.chain))
    tables = emit_density_data(chain, args.grid_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if len(tables) == 1:
        paths = [out]
        next(iter(tables.values())).to_csv(out, index=False)
    else:
        paths = []
        for coord, frame in tables.items():
            path = out.with_name(f"{out.stem}_{coord}{out.suffix or '.csv'}")
            frame.to_csv(path, index=False)
            paths.append(path)
    for path in paths:
        print(f"💾 Density written to {path}")
    return EXIT_OK


def cmd_loss(args) -> int:
    factory, truth = REFERENCE_MODELS[args.model]
    m = factory()
    axes = [np.linspace(lo, hi, args.points) for lo, hi in zip(m.theta_domain.lower, m.theta_domain.upper)]
    grid = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
    frame = emit_loss_profile(truth, m, gauss_legendre_rule(args.quadrature_points, m.x_domain), grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    best = frame.loc[frame["loss"].idxmin()]
    print(f"📉 Grid minimizer: {best[[f'theta_{j + 1}' for j in range(m.p)]].to_numpy().round(4)}")
    print(f"💾 Loss profile written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orthocal", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--workers", type=int, default=None, help="Replication worker processes")
        p.add_argument("--progress", action="store_true", help="Show progress bars")
        p.add_argument("--strict", action="store_true",
                       help="Exit non-zero when any calibration warning was raised")
        p.add_argument("--compare-outcomes", action="store_true",
                       help="Bivariate model: outcome-1, outcome-2 and joint fits on the same data")

    run = sub.add_parser("run", help="Run the experiment described by a config file")
    run.add_argument("--config", required=True, help="KEY=VALUE experiment config")
    run.add_argument("--out", default=None, help="Override OUTPUT_DIR")
    experiment_flags(run)
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="Run a bundled benchmark")
    bench.add_argument("--model", choices=[m for m in MODELS if m != "custom-runtable"], default="model1")
    bench.add_argument("--prior", choices=PRIORS, default="gp")
    bench.add_argument("--projection", choices=PROJECTIONS, default="functional")
    bench.add_argument("--reps", type=int, default=100)
    bench.add_argument("--seed", type=int, default=7)
    bench.add_argument("--n", type=int, default=100)
    bench.add_argument("--sigma", type=float, default=0.2)
    bench.add_argument("--iters", type=int, default=5000)
    bench.add_argument("--burnin", type=int, default=1000)
    bench.add_argument("--diagnostics", action="store_true", help="Multiplier columns in chain CSVs")
    bench.add_argument("--out", default="results")
    experiment_flags(bench)
    bench.set_defaults(func=cmd_bench)

    density = sub.add_parser("density", help="Kernel density of a chain CSV")
    density.add_argument("--chain", required=True)
    density.add_argument("--out", required=True)
    density.add_argument("--grid-size", type=int, default=256)
    density.set_defaults(func=cmd_density)

    loss = sub.add_parser("loss", help="Population loss profile of a bundled model")
    loss.add_argument("--model", choices=sorted(REFERENCE_MODELS), default="bivariate")
    loss.add_argument("--points", type=int, default=201, help="Grid points per parameter axis")
    loss.add_argument("--quadrature-points", type=int, default=64)
    loss.add_argument("--out", required=True)
    loss.set_defaults(func=cmd_loss)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except ExperimentError as e:
        print(f"❌ Experiment failed: {e}")
        return EXIT_FAILED
    except OrthocalError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
