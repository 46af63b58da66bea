import argparse
import logging
import os
import sys

from config import Config
from utils.errors import ConfigValidationError, ExperimentError
from utils.harness import load_config, run_experiment, scale_budgets

logger = logging.getLogger(__name__)

EXIT_CODES = {'pass': 0, 'fail': 1, 'inconclusive': 2}
EXIT_ERROR = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run a power-counting experiment and write CSV/JSON results")
    subparsers = parser.add_subparsers(dest='experiment', required=True, metavar='EXPERIMENT')
    for experiment in Config.EXPERIMENTS:
        sub = subparsers.add_parser(experiment, help=f"run the {experiment} experiment")
        sub.add_argument("--config", default=os.path.join(Config.EXPERIMENTS_DIR, f"{experiment}.yaml"),
                         help="YAML experiment document (default: %(default)s)")
        sub.add_argument("--seed", type=int, help="override the configured seed")
        sub.add_argument("--samples", type=float, help="multiply every sample budget by this factor")
        sub.add_argument("--out", help="override the output path prefix")
        sub.add_argument("--threads", type=int, default=Config.THREADS, help="worker threads (default: %(default)s)")
        sub.add_argument("--log-level", default=Config.LOG_LEVEL, type=str.upper, choices=Config.LOG_LEVELS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    status = Config.validate_config()
    for issue in status['issues']:
        logger.warning(f"Configuration issue: {issue}")
    if args.threads < 1:
        logger.error(f"--threads must be at least 1, got {args.threads}")
        return EXIT_ERROR

    try:
        config = load_config(args.config)
        if config.experiment != args.experiment:
            logger.error(f"{args.config} describes '{config.experiment}', not '{args.experiment}'")
            return EXIT_ERROR
        if args.samples is not None:
            config = scale_budgets(config, args.samples)
        config = config.override(seed=args.seed, output=args.out)
        bundle = run_experiment(config, threads=args.threads)
    except ConfigValidationError as e:
        for issue in e.issues:
            logger.error(f"Invalid configuration: {issue}")
        return EXIT_ERROR
    except (ExperimentError, OSError, ValueError) as e:
        logger.error(f"Error running {args.experiment}: {str(e)}")
        return EXIT_ERROR

    for check in bundle.checks:
        logger.info(f"{check['threshold']}: {check['value']:.6g} vs {check['bound']:.6g} -> {check['outcome']}")
    for path in bundle.paths:
        print(path)
    print(f"{bundle.experiment}: {bundle.status}")
    return EXIT_CODES[bundle.status]


if __name__ == "__main__":
    sys.exit(main())
