"""Command line interface for the meta-analysis toolkit."""

import argparse
import logging
import sys
import time
from datetime import date, datetime, timezone
from typing import Dict, List, Optional

from config.config import settings
from config.logger_config import run_id_ctx_var, setup_logger
from config.run_config import RunConfig, load_scenario
from mima import __version__
from schema.errors import InputError
from schema.models import EndpointMode, EvidenceSet, ModelSpec, SharingStructure
from schema.results import ConvergenceReport, FitStats, RunManifest
from services.diagnostics import DEFAULT_COMPLEXITY_ORDER, convergence_report, fit_stats, select_model
from services.evidence import emit_evidence, exclude_indication, load_evidence, snapshot, summarize, summary_totals
from services.prediction import loo_crossval, os_predictions, surrogacy_spec
from services.reporting import (
    crossval_table,
    dic_table,
    predictions_table,
    write_fit_artifacts,
    write_manifest,
)
from services.sampler import run
from services.synthetic import calibration_run, generate
from utils.file_utils import derive_seed, ensure_dir, file_checksum, write_csv, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_INTERNAL_ERROR = 2


def _iso_date(value: str) -> date:
    try:
        return date.fromisoformat(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid ISO date '{value}'") from None


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="Evidence CSV file")
    common.add_argument("--config", help="Run configuration file (key = value)")
    common.add_argument("--out", default="results", help="Output directory (default: results)")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--chains", type=int, help="Number of chains")
    common.add_argument("--burnin", type=int, help="Burn-in sweeps per chain")
    common.add_argument("--samples", type=int, help="Retained sweeps per chain")
    common.add_argument("--endpoint-mode", choices=[mode.value for mode in EndpointMode], help="Endpoint mode")
    common.add_argument("--sharing", choices=[s.value for s in SharingStructure], help="Sharing structure")

    sensitivity = common.add_argument_group("sensitivity analyses")
    sensitivity.add_argument("--exclude-indication", metavar="LABEL", help="Drop one indication before fitting")
    sensitivity.add_argument(
        "--independent-psi", action="store_true", help="Independent conditional variances across indications"
    )
    sensitivity.add_argument(
        "--tie-mixture", action="store_true", help="One mixture probability for all surrogacy parameters"
    )
    sensitivity.add_argument(
        "--common-effect-within", action="store_true", help="Common effect within each indication"
    )
    sensitivity.add_argument("--snapshot", type=_iso_date, metavar="DATE", help="Use evidence reported by DATE")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mima",
        description="Multi-indication Bayesian meta-analysis of log hazard ratios",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  mima validate --data trials.csv
  mima fit --data trials.csv --config run.cfg --out results/
  mima compare --data trials.csv --endpoint-mode univariate-os --out compare/
  mima predict --data trials.csv --sharing CP --out predict/
  mima crossval --data trials.csv --sharing IP --out crossval/
  mima simulate --scenario scenario.cfg --out synthetic/
""",
    )
    parser.add_argument("--version", action="version", version=f"mima {__version__}")
    common = _common_arguments()
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("validate", parents=[common], help="Parse and check an evidence file")
    commands.add_parser("fit", parents=[common], help="Fit one model and write summaries")
    commands.add_parser("compare", parents=[common], help="Fit all five sharing structures and compare DIC")
    predict = commands.add_parser("predict", parents=[common], help="Predict OS effects from PFS")
    predict.add_argument("--mode", choices=["matched", "ip-pfs"], help="Source of the PFS estimate")
    predict.add_argument("--include-psi", action="store_true", default=None, help="Add conditional variance noise")
    commands.add_parser("crossval", parents=[common], help="Leave-one-out surrogacy cross-validation")
    simulate = commands.add_parser("simulate", parents=[common], help="Generate synthetic evidence")
    simulate.add_argument("--scenario", required=True, help="Scenario file (key = value)")
    simulate.add_argument("--calibrate", type=int, metavar="N", help="Also run N calibration replications")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the configuration file, then command-line flags."""
    config = RunConfig.load(args.config)
    spec = {
        "endpoint_mode": args.endpoint_mode,
        "sharing": args.sharing,
        "sharing_psi": SharingStructure.IP if args.independent_psi else None,
        "tie_mixture_probabilities": True if args.tie_mixture else None,
        "common_effect_within_indication": True if args.common_effect_within else None,
    }
    sampler = {
        "seed": args.seed,
        "n_chains": args.chains,
        "burn_in": args.burnin,
        "samples_per_chain": args.samples,
    }
    return config.override(
        spec=spec,
        sampler=sampler,
        snapshot=args.snapshot,
        exclude_indication=args.exclude_indication,
        prediction_mode=getattr(args, "mode", None),
        include_psi=getattr(args, "include_psi", None),
    )


def load_inputs(args: argparse.Namespace, config: RunConfig) -> EvidenceSet:
    """Evidence file with the configured snapshot and exclusion applied."""
    if not args.data:
        raise InputError(f"'{args.command}' needs --data")
    evidence = snapshot(load_evidence(args.data), config.snapshot)
    if config.exclude_indication:
        evidence = exclude_indication(evidence, config.exclude_indication)
    if evidence.is_empty:
        raise InputError("no records left after snapshot and exclusion")
    return evidence


class Run:
    """State shared by one command: resolved config, output directory and manifest fields."""

    def __init__(self, args: argparse.Namespace, config: RunConfig):
        self.args = args
        self.config = config
        self.out = ensure_dir(args.out)
        self.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.start = time.time()
        self.acceptance: Dict[str, float] = {}
        self.flags: List[str] = []

    def record(self, report: ConvergenceReport, acceptance: Dict[str, float], prefix: str = "") -> None:
        self.acceptance.update({f"{prefix}{name}": rate for name, rate in acceptance.items()})
        self.flags += [f"{prefix}{row.quantity}[{row.label}]" for row in report.flagged]

    def finish(self) -> RunManifest:
        manifest = RunManifest(
            command=self.args.command,
            tool_version=__version__,
            config=self.config.to_text(),
            data_checksum=file_checksum(self.args.data) if self.args.data else "",
            seed=self.config.sampler.seed,
            started_at=self.started_at,
            wall_clock_seconds=round(time.time() - self.start, 3),
            acceptance=self.acceptance,
            convergence_flags=self.flags,
            status="warning" if self.flags else "ok",
        )
        write_manifest(self.out, manifest)
        if self.flags:
            logger.warning(f"Convergence flags set for {len(self.flags)} quantities; see convergence output")
        return manifest


def cmd_validate(args: argparse.Namespace, config: RunConfig) -> int:
    evidence = load_inputs(args, config)
    table = summarize(evidence)
    totals = summary_totals(table)
    print(table.to_string())
    print(f"total: {totals['n_trials']} trials, {totals['n_pfs']} PFS, {totals['n_os']} OS")
    report = {
        "status": "ok",
        "n_indications": evidence.n_indications,
        "totals": totals,
        "indications": table.reset_index().to_dict(orient="records"),
    }
    if args.out:
        write_json(report, ensure_dir(args.out) / "validation.json")
    return EXIT_OK


def _fit(spec: ModelSpec, evidence: EvidenceSet, state: Run, write: bool):
    posterior = run(spec, evidence, state.config.sampler)
    report = convergence_report(posterior, split=state.config.split_rhat)
    stats = fit_stats(posterior, evidence)
    if write:
        write_fit_artifacts(
            state.out, posterior, stats, report, write_raw_draws=state.config.write_draws or settings.write_draws
        )
    return posterior, report, stats


def cmd_fit(args: argparse.Namespace, config: RunConfig) -> int:
    evidence = load_inputs(args, config)
    state = Run(args, config)
    posterior, report, stats = _fit(config.spec, evidence, state, write=True)
    state.record(report, posterior.acceptance)
    state.finish()
    print(f"DIC {stats.dic:.3f} (Dbar {stats.dbar:.3f}, pD {stats.pd:.3f}); outputs in {state.out}")
    return EXIT_OK


def _structure_spec(base: ModelSpec, structure: SharingStructure) -> ModelSpec:
    fields = base.model_dump()
    fields.update(
        sharing=structure,
        tie_mixture_probabilities=base.tie_mixture_probabilities and structure.is_mixture,
    )
    return ModelSpec(**fields)


def cmd_compare(args: argparse.Namespace, config: RunConfig) -> int:
    evidence = load_inputs(args, config)
    state = Run(args, config)
    fits: Dict[SharingStructure, FitStats] = {}
    for structure in DEFAULT_COMPLEXITY_ORDER:
        posterior, report, stats = _fit(_structure_spec(config.spec, structure), evidence, state, write=False)
        state.record(report, posterior.acceptance, prefix=f"{structure.value}:")
        fits[structure] = stats
        logger.info(f"{structure.value}: DIC {stats.dic:.3f}, pD {stats.pd:.3f}")

    ordered = {structure: fits[structure] for structure in SharingStructure}
    selected = select_model(ordered)
    write_csv(dic_table(ordered, selected), state.out / "dic_table.csv")
    state.finish()
    print(f"selected: {selected.value}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, config: RunConfig) -> int:
    evidence = load_inputs(args, config)
    state = Run(args, config)
    predictions, uni, biv = os_predictions(
        config.spec, evidence, config.sampler, mode=config.mode, include_psi=config.include_psi
    )
    for prefix, posterior in (("pfs:", uni), ("surrogacy:", biv)):
        state.record(convergence_report(posterior, split=config.split_rhat), posterior.acceptance, prefix=prefix)
    write_csv(predictions_table(predictions), state.out / "predictions.csv")
    state.finish()
    print(f"{len(predictions)} OS predictions ({config.mode.value}) written to {state.out}")
    return EXIT_OK


def cmd_crossval(args: argparse.Namespace, config: RunConfig) -> int:
    evidence = load_inputs(args, config)
    state = Run(args, config)
    spec = config.spec
    if not spec.endpoint_mode.is_bivariate:
        logger.info(f"Cross-validating the bivariate surrogacy model with {spec.sharing.value} sharing")
        spec = surrogacy_spec(spec, spec.sharing)
    result = loo_crossval(spec, evidence, config.sampler)
    write_csv(crossval_table(result), state.out / "crossval.csv")
    state.finish()
    coverage = "n/a" if result.coverage is None else f"{result.coverage:.3f}"
    print(f"{len(result.rows)} masked studies, {len(result.skipped)} indications skipped, coverage {coverage}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seed": args.seed})
    state = Run(args, config)
    evidence, truth = generate(scenario)
    (state.out / "evidence.csv").write_text(emit_evidence(evidence), encoding="utf-8")
    write_json(truth.model_dump(), state.out / "truth.json")
    if args.calibrate:
        table = calibration_run(scenario, config.spec, args.calibrate, config.sampler)
        write_csv(table, state.out / "calibration.csv")
    state.finish()
    print(f"{len(evidence.records)} synthetic records written to {state.out}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "predict": cmd_predict,
    "crossval": cmd_crossval,
    "simulate": cmd_simulate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logger()
    token = run_id_ctx_var.set(f"{args.command}-{derive_seed(args.seed or 0, args.command):08x}")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except InputError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except Exception as e:
        logger.exception(f"{args.command} failed with an internal error: {e}")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL_ERROR
    finally:
        run_id_ctx_var.reset(token)


if __name__ == "__main__":
    sys.exit(main())
