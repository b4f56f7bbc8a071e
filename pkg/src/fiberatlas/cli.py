"""Command-line surface over the library.

Subcommands mirror the pipeline stages (synth cohort, ingest, atlas
build/label/inspect, parcellate, ir, measure, stats glm/ir-test/compare)
plus ``run`` for config-driven end-to-end execution and ``validate`` for
static config checking.  Exit codes are a stable contract: 0 success,
1 validation failure, 2 runtime failure, 3 I/O or file-format failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .atlas import (
    AtlasBuildConfig,
    AtlasBundleError,
    build_atlas,
    load_atlas,
    save_atlas,
    transfer_labels,
    with_cluster_labels,
)
from .config import (
    ConfigParseError,
    ConfigValidationError,
    load_config_mapping,
    validate_config,
)
from .embedding import RankDeficientAffinityError
from .fileio import TractogramFormatError, load_tractogram
from .measures import (
    compare_groups,
    extract_measures,
    fit_all_tracts,
    paired_ttest,
    read_measure_csv,
    write_comparison_csv,
    write_glm_csv,
    write_glm_summary_json,
    write_measure_csv,
    TractMeasureTable,
)
from .parcellation import (
    ParcellationConfig,
    export_tract_tcks,
    identify,
    load_parcellation,
    parcellate,
    read_ir_csv,
    save_parcellation,
    write_ir_csv,
)
from .pipeline import (
    StageError,
    ground_truth_cluster_names,
    ingest_cohort,
    run_pipeline,
    write_beta_csv,
    write_ir_threshold_csv,
    write_scatter_csv,
    write_synth_cohort,
)
from .registration import RegistrationConfig, TransformFamily
from .synth import PerturbationSpec, default_desk_cohort

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures, so they exit 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _parse_schedule(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated numbers, got {text!r}"
        )
    return values


def _add_registration_args(parser) -> None:
    group = parser.add_argument_group("registration")
    group.add_argument(
        "--no-registration", action="store_true",
        help="skip alignment; inputs already share a space",
    )
    group.add_argument(
        "--family", choices=[f.value for f in TransformFamily], default="rigid",
        help="transform family (default: rigid)",
    )
    group.add_argument(
        "--sigma-schedule", type=_parse_schedule, default=(15.0, 8.0),
        metavar="S1,S2,...", help="decreasing bandwidths in mm (default: 15,8)",
    )
    group.add_argument(
        "--reg-sample", type=int, default=25, metavar="N",
        help="fibers sampled per subject per scale (default: 25)",
    )
    group.add_argument(
        "--reg-iters", type=int, default=6, metavar="N",
        help="max descent sweeps per scale (default: 6)",
    )
    group.add_argument("--reg-tol", type=float, default=1e-3, metavar="TOL")
    group.add_argument("--reg-seed", type=int, default=0, metavar="SEED")
    group.add_argument(
        "--reg-points", type=int, default=10, metavar="N",
        help="resampled points per fiber inside the objective (default: 10)",
    )


def _registration_from_args(args) -> RegistrationConfig | None:
    if args.no_registration:
        return None
    return RegistrationConfig(
        transform_family=TransformFamily(args.family),
        sigma_schedule=args.sigma_schedule,
        fibers_per_subject_sample=args.reg_sample,
        max_iters_per_scale=args.reg_iters,
        convergence_tol=args.reg_tol,
        seed=args.reg_seed,
        points_per_fiber=args.reg_points,
    )


def _load_cohort_dir(path) -> list:
    files = sorted(Path(path).glob("*.tck"))
    if not files:
        raise ValueError(f"no .tck files found in {path}")
    return [load_tractogram(p) for p in files]


def _parcellation_files(path) -> list[Path]:
    files = sorted(Path(path).glob("*.parcellation.json"))
    if not files:
        raise ValueError(f"no .parcellation.json files found in {path}")
    return files


def _cmd_synth_cohort(args) -> int:
    spec = default_desk_cohort(
        subjects=args.subjects,
        fiber_count=args.fiber_count,
        seed=args.seed,
        perturbation=PerturbationSpec(
            translation_mm=args.translation_mm,
            rotation_deg=args.rotation_deg,
            log_scale=args.log_scale,
        ),
    )
    written = write_synth_cohort(spec, args.out)
    logger.info("stage=synth subjects=%d files=%d out=%s",
                args.subjects, len(written), args.out)
    return EXIT_OK


def _cmd_ingest(args) -> int:
    written = ingest_cohort([Path(p) for p in args.tractograms], args.out)
    logger.info("stage=ingest subjects=%d files=%d out=%s",
                len(args.tractograms), len(written), args.out)
    return EXIT_OK


def _write_transform_files(atlas, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = atlas.provenance
    for sid, matrix in zip(prov["subject_ids"], prov["subject_transforms"]):
        doc = {
            "format": "fiber-transform",
            "version": 1,
            "subject_id": sid,
            "units": "mm",
            "matrix34": matrix,
        }
        with open(out_dir / f"{sid}.transform.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    trace = prov.get("registration_objective_trace")
    if trace is not None:
        schedule = prov["registration"]["sigma_schedule"]
        with open(out_dir / "objective_trace.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scale_index", "sigma", "iteration", "objective"])
            for k, per_scale in enumerate(trace):
                for i, value in enumerate(per_scale):
                    writer.writerow([k, repr(schedule[k]), i, repr(value)])


def _cmd_atlas_build(args) -> int:
    cohort = _load_cohort_dir(args.cohort)
    cfg = AtlasBuildConfig(
        k=args.k,
        embedding_dims=args.embedding_dims,
        nystrom_sample_size=args.nystrom_sample,
        sigma=args.sigma,
        fibers_per_subject=args.fibers_per_subject,
        points_per_fiber=args.points_per_fiber,
        representatives_per_cluster=args.representatives,
        cluster_restarts=args.cluster_restarts,
        seed=args.seed,
        registration=_registration_from_args(args),
    )
    atlas = build_atlas(cohort, cfg)
    save_atlas(atlas, args.out)
    if args.transforms_out:
        _write_transform_files(atlas, Path(args.transforms_out))
    logger.info("stage=atlas-build clusters=%d out=%s", atlas.n_clusters, args.out)
    return EXIT_OK


def _cmd_atlas_label(args) -> int:
    atlas = load_atlas(args.atlas)
    if args.reference:
        labeled = transfer_labels(atlas, load_atlas(args.reference))
    else:
        names = ground_truth_cluster_names(atlas, args.cohort)
        labeled = with_cluster_labels(atlas, names)
    save_atlas(labeled, args.out)
    logger.info("stage=label tracts=%d out=%s", len(labeled.tract_names), args.out)
    return EXIT_OK


def _cmd_atlas_inspect(args) -> int:
    atlas = load_atlas(args.atlas)
    prov = atlas.provenance
    reg = prov.get("registration")
    lines = [
        f"clusters: {atlas.n_clusters}",
        f"embedding dims: {atlas.nystrom.n_dims}",
        f"points per fiber: {atlas.points_per_fiber}",
        f"sigma: {atlas.nystrom.sigma}",
        f"subjects: {len(prov.get('subject_ids', []))}",
        "registration: " + (
            "none" if reg is None else
            f"{reg['transform_family']}"
            + ("" if prov.get("registration_converged") is None
               else f", {'converged' if prov['registration_converged'] else 'not converged'}")
        ),
        f"fully labeled: {'yes' if atlas.is_fully_labeled else 'no'}",
        "labels:",
    ]
    counts = atlas.clusters.member_counts
    for i, label in enumerate(atlas.labels):
        reps = atlas.representative_fibers[i].shape[0]
        lines.append(
            f"  {i:3d}  {label.tract_name:24s} members={int(counts[i]):<6d} "
            f"representatives={reps}"
        )
    print("\n".join(lines))
    return EXIT_OK


def _cmd_parcellate(args) -> int:
    subject = load_tractogram(args.subject)
    atlas = load_atlas(args.atlas)
    cfg = ParcellationConfig(
        registration=_registration_from_args(args),
        outlier_rejection=args.outlier_rejection,
        outlier_sigma=args.outlier_sigma,
    )
    parc = parcellate(subject, atlas, cfg)
    save_parcellation(parc, args.out)
    if args.export_tracts:
        export_tract_tcks(parc, subject, args.export_tracts)
    logger.info("stage=parcellate subject=%s tracts=%d out=%s",
                subject.subject_id, len(parc.tract_fibers), args.out)
    return EXIT_OK


def _cmd_ir(args) -> int:
    parcs = [load_parcellation(p) for p in args.parcellations]
    results = [identify(p, args.threshold) for p in parcs]
    write_ir_csv(results, args.out)
    if args.plot_data:
        plot_dir = Path(args.plot_data)
        plot_dir.mkdir(parents=True, exist_ok=True)
        write_ir_threshold_csv(parcs, plot_dir / "ir_by_tract.csv")
    logger.info("stage=ir subjects=%d threshold=%d out=%s",
                len(results), args.threshold, args.out)
    return EXIT_OK


def _cmd_measure(args) -> int:
    rows = []
    for parc_path in _parcellation_files(args.parcellations):
        parc = load_parcellation(parc_path)
        subject = load_tractogram(Path(args.cohort) / f"{parc.subject_id}.tck")
        rows.extend(extract_measures(parc, subject))
    table = TractMeasureTable(tuple(rows))
    write_measure_csv(table, args.out)
    logger.info("stage=measure rows=%d out=%s", len(rows), args.out)
    return EXIT_OK


def _cmd_stats_glm(args) -> int:
    table = read_measure_csv(args.measures)
    covariates = list(args.covariate or [])
    results = fit_all_tracts(
        table,
        response=args.response,
        covariates=covariates,
        correct_over=args.correct_over,
    )
    write_glm_csv(results, args.out_csv)
    if args.out_json:
        write_glm_summary_json(results, covariates, args.out_json)
    if args.plot_data:
        plot_dir = Path(args.plot_data)
        plot_dir.mkdir(parents=True, exist_ok=True)
        write_scatter_csv(table, plot_dir / "fa_age_scatter.csv")
        write_beta_csv(results, plot_dir / "age_beta_by_tract.csv")
    logger.info("stage=stats-glm tracts=%d out=%s", len(results), args.out_csv)
    return EXIT_OK


def _cmd_stats_ir_test(args) -> int:
    rates_a = read_ir_csv(args.ir_a)
    rates_b = read_ir_csv(args.ir_b)
    common = sorted(set(rates_a) & set(rates_b))
    if len(common) < 3:
        raise ValueError(
            f"paired test needs at least 3 shared tracts, found {len(common)}"
        )
    result = paired_ttest(
        [rates_a[t] for t in common], [rates_b[t] for t in common]
    )
    doc = {
        "format": "ir-test",
        "version": 1,
        "n_tracts": len(common),
        "t": result.t,
        "df": result.df,
        "p": result.p,
    }
    text = json.dumps(doc, indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _cmd_stats_compare(args) -> int:
    table_a = read_measure_csv(args.measures_a)
    table_b = read_measure_csv(args.measures_b)
    comparison = compare_groups(
        table_a, table_b,
        covariates=list(args.covariate or []),
        response=args.response,
    )
    write_comparison_csv(comparison, args.out)
    logger.info("stage=stats-compare tracts=%d out=%s",
                len(comparison.betas_a), args.out)
    return EXIT_OK


def _cmd_run(args) -> int:
    doc = load_config_mapping(args.config)
    if args.jobs is not None:
        doc.setdefault("run", {})["jobs"] = args.jobs
    manifest = run_pipeline(
        doc, args.out, plot_data=args.plot_data, force=args.force
    )
    logger.info("run complete: %s", manifest)
    return EXIT_OK


def _cmd_validate(args) -> int:
    doc = load_config_mapping(args.config)
    problems = validate_config(doc)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return EXIT_VALIDATION
    print("ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # shared -q/-v so the flags parse in either position
    common = _Parser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true",
                        help="warnings and errors only")
    common.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")

    parser = _Parser(
        prog="fiberatlas",
        description="Streamline atlas construction, parcellation, and "
                    "developmental statistics.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    synth = sub.add_parser("synth", help="synthetic data generation")
    synth_sub = synth.add_subparsers(dest="subcommand", required=True)
    cohort = synth_sub.add_parser("cohort", parents=[common],
                                  help="generate the benchmark cohort")
    cohort.add_argument("--out", required=True, help="cohort output directory")
    cohort.add_argument("--subjects", type=int, default=20)
    cohort.add_argument("--fiber-count", type=int, default=100,
                        help="fibers per bundle (8 bundles)")
    cohort.add_argument("--seed", type=int, default=0)
    cohort.add_argument("--translation-mm", type=float, default=10.0)
    cohort.add_argument("--rotation-deg", type=float, default=10.0)
    cohort.add_argument("--log-scale", type=float, default=0.0)
    cohort.set_defaults(func=_cmd_synth_cohort)

    ingest = sub.add_parser("ingest", parents=[common], help="normalize external tractograms")
    ingest.add_argument("tractograms", nargs="+", metavar="TCK")
    ingest.add_argument("--out", required=True, help="cohort output directory")
    ingest.set_defaults(func=_cmd_ingest)

    atlas = sub.add_parser("atlas", help="atlas construction and labeling")
    atlas_sub = atlas.add_subparsers(dest="subcommand", required=True)

    build = atlas_sub.add_parser("build", parents=[common], help="build an unlabeled atlas")
    build.add_argument("--cohort", required=True, help="directory of .tck subjects")
    build.add_argument("--out", required=True, help="atlas bundle directory")
    build.add_argument("--k", type=int, required=True, help="number of clusters")
    build.add_argument("--embedding-dims", type=int, default=10)
    build.add_argument("--nystrom-sample", type=int, default=200)
    build.add_argument("--sigma", type=float, default=30.0)
    build.add_argument("--fibers-per-subject", type=int, default=400)
    build.add_argument("--points-per-fiber", type=int, default=15)
    build.add_argument("--representatives", type=int, default=10)
    build.add_argument("--cluster-restarts", type=int, default=8)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--transforms-out", metavar="DIR",
                       help="also write per-subject transforms and the "
                            "objective trace")
    _add_registration_args(build)
    build.set_defaults(func=_cmd_atlas_build)

    label = atlas_sub.add_parser("label", parents=[common], help="attach anatomical labels")
    label.add_argument("--atlas", required=True, help="unlabeled atlas bundle")
    label.add_argument("--out", required=True, help="labeled atlas bundle directory")
    source = label.add_mutually_exclusive_group(required=True)
    source.add_argument("--reference", help="labeled reference atlas bundle")
    source.add_argument("--cohort",
                        help="cohort directory with ground-truth sidecars")
    label.set_defaults(func=_cmd_atlas_label)

    inspect = atlas_sub.add_parser("inspect", parents=[common], help="print an atlas summary")
    inspect.add_argument("--atlas", required=True)
    inspect.set_defaults(func=_cmd_atlas_inspect)

    parc = sub.add_parser("parcellate", parents=[common], help="assign one subject's fibers")
    parc.add_argument("--subject", required=True, metavar="TCK")
    parc.add_argument("--atlas", required=True, help="labeled atlas bundle")
    parc.add_argument("--out", required=True, metavar="JSON")
    parc.add_argument("--export-tracts", metavar="DIR",
                      help="also write one TCK per identified tract")
    parc.add_argument("--outlier-rejection", action="store_true")
    parc.add_argument("--outlier-sigma", type=float, default=2.0)
    _add_registration_args(parc)
    parc.set_defaults(func=_cmd_parcellate)

    ir = sub.add_parser("ir", parents=[common], help="identification rates over parcellations")
    ir.add_argument("parcellations", nargs="+", metavar="JSON")
    ir.add_argument("--out", required=True, metavar="CSV")
    ir.add_argument("--threshold", type=int, default=10)
    ir.add_argument("--plot-data", metavar="DIR",
                    help="also write rates across thresholds 5/10/15")
    ir.set_defaults(func=_cmd_ir)

    measure = sub.add_parser("measure", parents=[common], help="per-tract diffusion measures")
    measure.add_argument("--parcellations", required=True,
                         help="directory of .parcellation.json files")
    measure.add_argument("--cohort", required=True,
                         help="directory of matching .tck subjects")
    measure.add_argument("--out", required=True, metavar="CSV")
    measure.set_defaults(func=_cmd_measure)

    stats = sub.add_parser("stats", help="developmental statistics")
    stats_sub = stats.add_subparsers(dest="subcommand", required=True)

    glm = stats_sub.add_parser("glm", parents=[common], help="per-tract age-slope fits")
    glm.add_argument("--measures", required=True, metavar="CSV")
    glm.add_argument("--out-csv", required=True, metavar="CSV")
    glm.add_argument("--out-json", metavar="JSON")
    glm.add_argument("--response", default="mean_fa",
                     choices=["mean_fa", "mean_md", "nos"])
    glm.add_argument("--covariate", action="append", metavar="NAME")
    glm.add_argument("--correct-over", type=int, metavar="N",
                     help="Bonferroni divisor override")
    glm.add_argument("--plot-data", metavar="DIR",
                     help="also write scatter and slope CSVs")
    glm.set_defaults(func=_cmd_stats_glm)

    ir_test = stats_sub.add_parser("ir-test", parents=[common],
                                   help="paired t-test between two IR tables")
    ir_test.add_argument("--ir-a", required=True, metavar="CSV")
    ir_test.add_argument("--ir-b", required=True, metavar="CSV")
    ir_test.add_argument("--out", metavar="JSON",
                         help="write the report here instead of stdout")
    ir_test.set_defaults(func=_cmd_stats_ir_test)

    compare = stats_sub.add_parser("compare", parents=[common], help="two-group slope comparison")
    compare.add_argument("--measures-a", required=True, metavar="CSV")
    compare.add_argument("--measures-b", required=True, metavar="CSV")
    compare.add_argument("--out", required=True, metavar="CSV")
    compare.add_argument("--response", default="mean_fa",
                         choices=["mean_fa", "mean_md", "nos"])
    compare.add_argument("--covariate", action="append", metavar="NAME")
    compare.set_defaults(func=_cmd_stats_compare)

    run = sub.add_parser("run", parents=[common], help="config-driven end-to-end pipeline")
    run.add_argument("--config", required=True, metavar="YAML")
    run.add_argument("--out", required=True, metavar="DIR")
    run.add_argument("--plot-data", action="store_true",
                     help="emit per-figure CSVs under <out>/plot-data")
    run.add_argument("--force", action="store_true",
                     help="restart instead of resuming")
    run.add_argument("--jobs", type=int, metavar="N",
                     help="per-subject fan-out (outputs are identical for any N)")
    run.set_defaults(func=_cmd_run)

    validate = sub.add_parser("validate", parents=[common], help="statically check a config file")
    validate.add_argument("--config", required=True, metavar="YAML")
    validate.set_defaults(func=_cmd_validate)

    return parser


def _configure_logging(args) -> None:
    level = logging.INFO
    if getattr(args, "quiet", False):
        level = logging.WARNING
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        return args.func(args)
    except (ConfigParseError, ConfigValidationError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except (TractogramFormatError, AtlasBundleError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except StageError as exc:
        logger.error("%s", exc)
        if isinstance(exc.__cause__, (TractogramFormatError, AtlasBundleError, OSError)):
            return EXIT_IO
        return EXIT_RUNTIME
    except RankDeficientAffinityError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except (RuntimeError, ArithmeticError) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
