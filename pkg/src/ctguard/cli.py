"""Command-line front end.

Subcommands: ingest, phantom, convert-annotations, run, report.
Exit codes: 0 success, 1 runtime error, 2 usage error. `run` reads an
optional TOML config; command-line flags override config values.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from .cohort import (
    Annotation,
    Tag,
    load_annotations,
    load_cohort_volumes,
    load_manifest,
    write_annotations,
)
from .evalkit import read_report, write_roc_artifacts
from .phantom import PhantomSpec, write_corpus
from .pipeline import (
    AUGMENT_TEST_MODES,
    LEARNERS,
    ConfigError,
    ExperimentConfig,
    PipelineError,
    Study,
    parse_canvas,
    parse_learner_param,
    parse_phantom_spec,
    run,
)

_CONFIG_KEYS = {
    "study",
    "learner",
    "seed",
    "manifest",
    "annotations",
    "phantom",
    "augment_test",
    "output_dir",
    "window_low",
    "window_high",
    "crop_size",
    "canvas",
    "body_threshold",
}
_PARAM_KEYS = {
    "n_trees",
    "max_depth",
    "min_samples_leaf",
    "features_per_split",
    "bootstrap",
    "n_jobs",
    "C",
    "gamma",
    "tol",
    "max_iter",
    "kernel",
}


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config {path} is not valid TOML: {err}") from err
    unknown = set(doc) - _CONFIG_KEYS - _PARAM_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _study_from_name(name: str) -> Study:
    try:
        return Study(name.upper())
    except ValueError:
        raise ConfigError(
            f"unknown study {name!r}; expected one of {[s.value for s in Study]}"
        ) from None


def _build_experiment(args: argparse.Namespace) -> ExperimentConfig:
    doc = _load_config_file(args.config) if args.config else {}

    # flags override config file values
    overrides = {
        "study": args.study,
        "learner": args.learner,
        "seed": args.seed,
        "manifest": args.manifest,
        "annotations": args.annotations,
        "phantom": args.phantom,
        "augment_test": args.augment_test,
        "output_dir": args.output_dir,
        "window_low": args.window_low,
        "window_high": args.window_high,
        "crop_size": args.crop_size,
        "canvas": args.canvas,
        "body_threshold": args.body_threshold,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value

    if "study" not in doc:
        raise ConfigError("a study is required (--study or config file)")
    study = _study_from_name(str(doc["study"]))

    learner = str(doc.get("learner", "forest"))
    params = {}
    for key in _PARAM_KEYS & set(doc):
        params[key] = parse_learner_param(key, doc[key])
    for item in args.param or []:
        if "=" not in item:
            raise ConfigError(f"--param needs key=value, got {item!r}")
        key, value = item.split("=", 1)
        params[key.strip()] = parse_learner_param(key.strip(), value.strip())

    phantom = doc.get("phantom")
    if phantom is not None and not isinstance(phantom, PhantomSpec):
        phantom = parse_phantom_spec(str(phantom))
    canvas = doc.get("canvas")
    if canvas is not None and not isinstance(canvas, tuple):
        canvas = parse_canvas(str(canvas))

    try:
        seed = int(doc.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {doc.get('seed')!r}") from None

    return ExperimentConfig(
        study=study,
        learner=learner,
        seed=seed,
        manifest=doc.get("manifest"),
        annotations=doc.get("annotations"),
        phantom=phantom,
        learner_params=params,
        augment_test=doc.get("augment_test"),
        window_low=doc.get("window_low"),
        window_high=doc.get("window_high"),
        crop_size=doc.get("crop_size"),
        canvas=canvas,
        body_threshold=doc.get("body_threshold"),
        output_dir=str(doc.get("output_dir", "runs")),
    )


def _cmd_run(args: argparse.Namespace) -> int:
    config = _build_experiment(args)
    report, run_dir = run(config)
    print(f"study:     {config.study.value}")
    print(f"learner:   {config.learner}")
    print(f"accuracy:  {report.accuracy:.4f}")
    for cls, pr in sorted(report.per_class.items()):
        print(f"  {cls}: precision {pr['precision']:.4f}  recall {pr['recall']:.4f}")
    for cls, curve in sorted(report.roc.items()):
        print(f"  {cls}: auc {curve.auc:.4f}")
    print(f"artifacts: {run_dir}")
    return 0


def _cmd_phantom(args: argparse.Namespace) -> int:
    spec = parse_phantom_spec(args.spec) if args.spec else PhantomSpec()
    root = write_corpus(spec, args.out)
    n_slices = spec.n_patients * spec.slices_per_patient
    print(f"wrote {spec.n_patients} patients ({n_slices} slices) to {root}")
    return 0


def _cmd_ingest(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    by_patient = load_cohort_volumes(manifest)
    annotations = load_annotations(args.annotations) if args.annotations else []
    trials = manifest.trials()
    print(f"{'patient':<10} {'slices':>6} {'trial':>6} {'annotations':>12}")
    for entry in manifest.entries:
        volume = by_patient[entry.patient_id]
        n_ann = sum(1 for a in annotations if a.patient_id == entry.patient_id)
        trial = trials.get(entry.patient_id)
        print(
            f"{entry.patient_id:<10} {len(volume.slices):>6} "
            f"{trial.value if trial else '-':>6} {n_ann:>12}"
        )
    total = sum(len(v.slices) for v in by_patient.values())
    print(f"{len(by_patient)} patients, {total} slices, {len(annotations)} annotations")
    return 0


_CTGAN_TAGS = {"FM": Tag.FM, "FB": Tag.FB, "TM": Tag.FM, "TB": Tag.FB}


def _convert_rows(source: str, reader: csv.reader, warn) -> list[Annotation]:
    rows = []
    for lineno, row in enumerate(reader, start=2):
        try:
            if source == "native":
                pid, k, x, y, tag = row
                rows.append(
                    Annotation(
                        patient_id=pid,
                        slice_index=int(k),
                        x=int(x),
                        y=int(y),
                        tag=Tag(tag.strip().upper()),
                    )
                )
            else:  # ctgan coordinate dump: uuid, slice, x, y, injection code
                uuid, k, x, y, code = row
                tag = _CTGAN_TAGS.get(code.strip().upper())
                if tag is None:
                    raise ValueError(f"unknown injection code {code!r}")
                rows.append(
                    Annotation(
                        patient_id=uuid,
                        slice_index=int(k),
                        x=int(round(float(x))),
                        y=int(round(float(y))),
                        tag=tag,
                    )
                )
        except (ValueError, KeyError) as err:
            warn(f"line {lineno}: skipping malformed row {row!r}: {err}")
    return rows


def _cmd_convert_annotations(args: argparse.Namespace) -> int:
    warn = lambda msg: print(f"warning: {msg}", file=sys.stderr)
    if args.source == "phantom":
        # the generated corpus already carries ground-truth annotations
        source_csv = Path(args.input)
        if source_csv.is_dir():
            source_csv = source_csv / "annotations.csv"
        rows = load_annotations(source_csv)
    else:
        with open(args.input, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise PipelineError(f"{args.input} is empty")
            rows = _convert_rows(args.source, reader, warn)
    write_annotations(args.output, rows)
    print(f"wrote {len(rows)} annotations to {args.output}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    report = read_report(args.path)
    meta = report.run_metadata
    config = meta.get("config", {})
    print(f"study:    {config.get('study', '?')}")
    print(f"learner:  {meta.get('learner', config.get('learner', '?'))}")
    print(f"accuracy: {report.accuracy:.4f}")
    print(f"classes:  {report.confusion.class_names}")
    print("confusion (rows true, cols predicted):")
    for row in report.confusion.counts:
        print("  " + " ".join(f"{int(n):>5}" for n in row))
    for cls, pr in sorted(report.per_class.items()):
        print(f"{cls}: precision {pr['precision']:.4f}  recall {pr['recall']:.4f}")
    for cls, curve in sorted(report.roc.items()):
        print(f"{cls}: auc {curve.auc:.4f} ({len(curve.points)} roc points)")
    for warning in meta.get("warnings", []):
        print(f"warning: {warning}")
    if args.svg:
        paths = write_roc_artifacts(report, Path(args.path).parent)
        svgs = [p for p in paths if p.suffix == ".svg"]
        print(f"regenerated {len(svgs)} svg plots in {Path(args.path).parent}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctguard",
        description="Detect GAN-style tumor injection/removal tampering in CT volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment end to end")
    p_run.add_argument("--config", help="TOML config file; flags override it")
    p_run.add_argument("--study", help="|".join(s.value for s in Study))
    p_run.add_argument("--learner", choices=LEARNERS)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--manifest", help="cohort manifest.json path")
    p_run.add_argument("--annotations", help="annotation csv path")
    p_run.add_argument("--phantom", help="synthetic corpus spec, e.g. seed=1,dims=272x288")
    p_run.add_argument("--augment-test", dest="augment_test", choices=AUGMENT_TEST_MODES)
    p_run.add_argument("--output-dir", dest="output_dir")
    p_run.add_argument("--window-low", dest="window_low", type=float)
    p_run.add_argument("--window-high", dest="window_high", type=float)
    p_run.add_argument("--crop-size", dest="crop_size", type=int)
    p_run.add_argument("--canvas", help="negative-space canvas ROWSxCOLS")
    p_run.add_argument("--body-threshold", dest="body_threshold", type=float)
    p_run.add_argument(
        "--param",
        action="append",
        metavar="KEY=VALUE",
        help="learner hyperparameter, repeatable (e.g. --param n_trees=300)",
    )
    p_run.set_defaults(func=_cmd_run)

    p_phantom = sub.add_parser("phantom", help="write a synthetic DICOM corpus")
    p_phantom.add_argument("--spec", default="", help="key=value list, see run --phantom")
    p_phantom.add_argument("--out", required=True, help="corpus directory")
    p_phantom.set_defaults(func=_cmd_phantom)

    p_ingest = sub.add_parser("ingest", help="load and summarize a cohort")
    p_ingest.add_argument("--manifest", required=True)
    p_ingest.add_argument("--annotations")
    p_ingest.set_defaults(func=_cmd_ingest)

    p_conv = sub.add_parser(
        "convert-annotations", help="convert source annotation formats to the native csv"
    )
    p_conv.add_argument("--source", required=True, choices=("native", "ctgan", "phantom"))
    p_conv.add_argument("--input", required=True)
    p_conv.add_argument("--output", required=True)
    p_conv.set_defaults(func=_cmd_convert_annotations)

    p_report = sub.add_parser("report", help="pretty-print a stored report")
    p_report.add_argument("path", help="report.json path")
    p_report.add_argument("--svg", action="store_true", help="regenerate roc svg plots")
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - map module errors to exit 1
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
