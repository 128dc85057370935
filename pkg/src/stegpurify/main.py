"""Main entry point for stegpurify"""

import sys
from typing import Callable, Dict, Sequence

REQUIRED_PYTHON = (3, 12)

if sys.version_info[:2] < REQUIRED_PYTHON:
    print(
        f"stegpurify requires Python {REQUIRED_PYTHON[0]}.{REQUIRED_PYTHON[1]} or later, but found "
        f"Python {sys.version_info[0]}.{sys.version_info[1]}."
    )
    sys.exit(1)
else:
    from stegpurify import harness
    from stegpurify._util import ConfigurationError, StegPurifyError, select_device, setup_logger
    from stegpurify.argument_handler import ArgumentHandler, ParsedArgs
    from stegpurify.experiment_config import ExperimentConfig, load_experiment

TRAIN_FAMILIES = {
    "train-hiding": ("ae", "hiding"),
    "train-ae": ("ae",),
    "train-ebra": ("ebra",),
}


class StegPurify:
    """Main class"""

    def __init__(self, argv: Sequence[str] | None = None):
        handler = ArgumentHandler()
        self.args: ParsedArgs = (
            handler.parse_args() if argv is None else handler.parse_args_from(argv)
        )

    def run(self) -> int:
        """Dispatch the command and return the process exit status."""
        args = self.args
        setup_logger(args.verbose)
        cfg = load_experiment(args.config, args.overrides)
        commands: Dict[str, Callable[[ExperimentConfig], int]] = {
            "attack": self._attack,
            "evaluate": self._evaluate,
            "grid": self._grid,
            "sweep-k": self._sweep_k,
            "bench": self._bench,
            "report": self._report,
        }
        if args.command in TRAIN_FAMILIES:
            return self._train(cfg, TRAIN_FAMILIES[args.command])
        return commands[args.command](cfg)

    def _train(self, cfg: ExperimentConfig, families) -> int:
        summary = harness.stage_train_all(cfg, select_device(self.args.device), families)
        for name in summary.ran:
            print(f"trained  {name}")
        for name in summary.skipped:
            print(f"skipped  {name} (up to date)")
        for name in summary.blocked:
            print(f"blocked  {name}")
        for name, error in summary.failed.items():
            print(f"failed   {name}: {error}")
        return 0 if summary.ok else 1

    def _attack(self, cfg: ExperimentConfig) -> int:
        args = self.args
        if args.attack is None or args.input_path is None or args.output_path is None:
            raise ConfigurationError("attack needs --attack, --in and --out")
        written = harness.attack_files(
            cfg,
            args.attack,
            args.input_path,
            args.output_path,
            args.scheme,
            select_device(args.device),
        )
        print(f"Wrote {len(written)} attacked image(s)")
        return 0

    def _evaluate(self, cfg: ExperimentConfig) -> int:
        args = self.args
        if args.scheme is None or args.before is None or args.after is None:
            raise ConfigurationError("evaluate needs --scheme, --before and --after")
        row = harness.evaluate_directories(
            cfg,
            args.scheme,
            args.before,
            args.after,
            args.attack or "external",
            select_device(args.device),
        )
        print(f"PSNR-C|PSNR-S  {row.psnr_c:.2f}|{row.psnr_s:.2f}")
        print(f"VIF-C|VIF-S    {row.vif_c:.3f}|{row.vif_s:.3f}")
        print(f"BER            {row.ber_binarized:.3f}")
        return 0

    def _grid(self, cfg: ExperimentConfig) -> int:
        result = harness.run_grid(cfg, select_device(self.args.device))
        print(f"{len(result.rows)} cell(s) written to {result.paths['rows'].parent}")
        for cell in result.failures:
            print(f"failed   {cell.scheme} x {cell.attack}: {cell.error}")
        return 0 if result.ok else 1

    def _sweep_k(self, cfg: ExperimentConfig) -> int:
        points = harness.run_k_sweep(
            cfg, self.args.k_values or None, select_device(self.args.device), self.args.scheme
        )
        for point in points:
            print(f"k={point.k:<4d} VIF-C {point.vif_c:.3f}  VIF-S {point.vif_s:.3f}")
        return 0

    def _bench(self, cfg: ExperimentConfig) -> int:
        results = harness.benchmark_timing(cfg, select_device(self.args.device), self.args.images)
        for result in results.values():
            flag = "  (variable)" if result.flagged else ""
            print(f"{result.attack:<24} {result.mean_ms:9.3f} ms{flag}")
        return 0

    def _report(self, cfg: ExperimentConfig) -> int:
        for path in harness.render_report(cfg).values():
            print(path)
        return 0


def main(argv: Sequence[str] | None = None) -> None:
    """Main entry point"""

    try:
        status = StegPurify(argv).run()
    except StegPurifyError as e:
        print(e)
        sys.exit(e.exit_code)
    if status:
        sys.exit(status)


if __name__ == "__main__":
    main()
