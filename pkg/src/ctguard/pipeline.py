"""End-to-end experiment orchestration.

A declarative config names a study, a data source (cohort manifest or
synthetic corpus), a learner, and a seed; ``run`` executes the full
chain (ingest, preprocess, augment, train, evaluate) and writes the
report artifacts under a config-hash directory so runs never collide.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .augment import FULL_FAMILY, AugmentSpec, augment_image
from .cohort import (
    Label,
    Sample,
    SplitPlan,
    SplitPolicy,
    Trial,
    assemble,
    balance,
    load_annotations,
    load_cohort_volumes,
    load_manifest,
    split,
)
from .evalkit import MetricsReport, evaluate, write_report, write_roc_artifacts
from .learners import fit_forest, fit_svm, fit_tree
from .learners.io import save_model
from .learners.svm import KernelKind
from .phantom import PhantomSpec, write_corpus
from .preprocess import (
    PreprocessRegime,
    RegimeKind,
    flatten,
    load_tensor,
    save_tensor,
)

CACHE_ENV = "CTGUARD_CACHE_DIR"


class PipelineError(Exception):
    """Raised for unrunnable configurations."""


class ConfigError(PipelineError):
    """Raised when a config fails validation (a usage error, not a runtime one)."""


class Study(Enum):
    RAW_BINARY = "RAW_BINARY"
    LOCALIZED = "LOCALIZED"
    LOCALIZED_AUG = "LOCALIZED_AUG"
    NEGSPACE = "NEGSPACE"
    NEGSPACE_AUG = "NEGSPACE_AUG"
    MULTICLASS = "MULTICLASS"

    @property
    def regime_kind(self) -> RegimeKind:
        if self is Study.RAW_BINARY:
            return RegimeKind.RAW
        if self in (Study.LOCALIZED, Study.LOCALIZED_AUG):
            return RegimeKind.LOCALIZED
        return RegimeKind.NEGSPACE

    @property
    def augmented(self) -> bool:
        return self.name.endswith("AUG") or self is Study.MULTICLASS

    @property
    def multiclass(self) -> bool:
        return self is Study.MULTICLASS

    @property
    def default_augment_test(self) -> str:
        if self is Study.MULTICLASS:
            return "tampered"
        if self.augmented:
            return "both"
        return "none"


LEARNERS = ("tree", "forest", "svm")
AUGMENT_TEST_MODES = ("none", "tampered", "both")

# which flat learner-parameter keys each learner accepts
_LEARNER_PARAMS = {
    "tree": {"max_depth", "min_samples_leaf"},
    "forest": {
        "n_trees",
        "max_depth",
        "min_samples_leaf",
        "features_per_split",
        "bootstrap",
        "n_jobs",
    },
    "svm": {"C", "gamma", "tol", "max_iter", "kernel"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    study: Study
    learner: str = "forest"
    seed: int = 0
    manifest: str | None = None
    annotations: str | None = None
    phantom: PhantomSpec | None = None
    learner_params: dict = field(default_factory=dict)
    augment_test: str | None = None
    window_low: float | None = None
    window_high: float | None = None
    crop_size: int | None = None
    canvas: tuple[int, int] | None = None
    body_threshold: float | None = None
    output_dir: str = "runs"

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigError(f"unknown learner {self.learner!r}; expected one of {LEARNERS}")
        if (self.manifest is None) == (self.phantom is None):
            raise ConfigError("config needs exactly one data source: manifest or phantom")
        if self.manifest is not None and self.annotations is None:
            raise ConfigError("a cohort manifest needs an annotations csv")
        if self.augment_test is not None and self.augment_test not in AUGMENT_TEST_MODES:
            raise ConfigError(
                f"augment_test must be one of {AUGMENT_TEST_MODES}, got {self.augment_test!r}"
            )
        allowed = _LEARNER_PARAMS[self.learner]
        unknown = set(self.learner_params) - allowed
        if unknown:
            raise ConfigError(
                f"parameters {sorted(unknown)} do not apply to learner {self.learner!r}"
            )

    def regime(self) -> PreprocessRegime:
        kw = {}
        if self.window_low is not None:
            kw["window_low"] = self.window_low
        if self.window_high is not None:
            kw["window_high"] = self.window_high
        if self.crop_size is not None:
            kw["crop_size"] = self.crop_size
        if self.canvas is not None:
            kw["canvas"] = self.canvas
        if self.body_threshold is not None:
            kw["body_threshold"] = self.body_threshold
        return PreprocessRegime(kind=self.study.regime_kind, **kw)

    def resolved_augment_test(self) -> str:
        return self.augment_test or self.study.default_augment_test

    def resolved(self) -> dict:
        """Flat, fully-defaulted view embedded in reports and hashed for run dirs."""
        regime = self.regime()
        doc = {
            "study": self.study.value,
            "learner": self.learner,
            "learner_params": {k: self.learner_params[k] for k in sorted(self.learner_params)},
            "seed": self.seed,
            "stage_seeds": {
                "balance": self.seed + 1,
                "split": self.seed + 2,
                "learner": self.seed + 3,
                "class_cap": self.seed + 4,
            },
            "augment_test": self.resolved_augment_test(),
            "regime": {
                "kind": regime.kind.value,
                "window_low": regime.window_low,
                "window_high": regime.window_high,
                "crop_size": regime.crop_size,
                "canvas": list(regime.canvas),
                "body_threshold": regime.body_threshold,
                "fingerprint": regime.fingerprint(),
            },
        }
        if self.phantom is not None:
            p = self.phantom
            doc["phantom"] = {
                "seed": p.seed,
                "n_patients": p.n_patients,
                "slices_per_patient": p.slices_per_patient,
                "dims": list(p.dims),
                "lesion_radius_px": list(p.lesion_radius_px),
                "lesion_contrast_hu": list(p.lesion_contrast_hu),
                "tamper_signature_strength": p.tamper_signature_strength,
            }
        else:
            doc["manifest"] = str(self.manifest)
            doc["annotations"] = str(self.annotations)
        return doc

    def run_id(self) -> str:
        doc = self.resolved()
        # parallelism cannot change results, so it does not name the run
        doc.get("learner_params", {}).pop("n_jobs", None)
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_phantom_spec(text: str) -> PhantomSpec:
    """Build a PhantomSpec from 'key=value,key=value' text (CLI/TOML form).

    dims takes ROWSxCOLS; strength is shorthand for tamper_signature_strength.
    """
    spec = PhantomSpec()
    fields = {}
    if text.strip():
        for item in text.split(","):
            if "=" not in item:
                raise ConfigError(f"phantom spec items need key=value, got {item!r}")
            key, value = (part.strip() for part in item.split("=", 1))
            fields[key] = value
    for key, value in fields.items():
        try:
            if key == "seed":
                spec = replace(spec, seed=int(value))
            elif key == "n_patients":
                spec = replace(spec, n_patients=int(value))
            elif key == "slices_per_patient":
                spec = replace(spec, slices_per_patient=int(value))
            elif key == "dims":
                rows, cols = value.lower().split("x")
                spec = replace(spec, dims=(int(rows), int(cols)))
            elif key in ("strength", "tamper_signature_strength"):
                spec = replace(spec, tamper_signature_strength=float(value))
            elif key == "lesion_radius_px":
                lo, hi = value.split(":")
                spec = replace(spec, lesion_radius_px=(float(lo), float(hi)))
            elif key == "lesion_contrast_hu":
                lo, hi = value.split(":")
                spec = replace(spec, lesion_contrast_hu=(float(lo), float(hi)))
            else:
                raise ConfigError(f"unknown phantom field {key!r}")
        except (ValueError, TypeError) as err:
            raise ConfigError(f"bad phantom field {key}={value!r}: {err}") from err
    return spec


def parse_canvas(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError as err:
        raise ConfigError(f"canvas must be ROWSxCOLS, got {text!r}") from err


_PARAM_PARSERS = {
    "n_trees": int,
    "max_depth": int,
    "min_samples_leaf": int,
    "features_per_split": int,
    "n_jobs": int,
    "max_iter": int,
    "bootstrap": _parse_bool,
    "C": float,
    "gamma": float,
    "tol": float,
    "kernel": str,
}


def parse_learner_param(key: str, value) -> object:
    if key not in _PARAM_PARSERS:
        raise ConfigError(f"unknown learner parameter {key!r}")
    if isinstance(value, str):
        try:
            return _PARAM_PARSERS[key](value)
        except ValueError as err:
            raise ConfigError(f"bad value for {key}: {value!r}") from err
    if key == "kernel" and not isinstance(value, str):
        raise ConfigError(f"kernel must be a string, got {value!r}")
    return value


def _binary_label(label: Label) -> str:
    return "untampered" if label is Label.UNTAMPERED else "tampered"


def _multiclass_label(label: Label) -> str:
    return label.value


def _cohort_hash(volumes, annotations, trials) -> str:
    digest = hashlib.sha256()
    if hasattr(volumes, "values"):
        volumes = volumes.values()
    for volume in sorted(volumes, key=lambda v: v.patient_id):
        digest.update(volume.patient_id.encode())
        for s in volume.slices:
            digest.update(
                json.dumps(
                    [
                        s.instance_number,
                        s.rescale_slope,
                        s.rescale_intercept,
                        s.slice_location,
                    ],
                    sort_keys=True,
                ).encode()
            )
            digest.update(np.ascontiguousarray(s.stored_pixels).tobytes())
    for a in sorted(annotations, key=lambda a: (a.patient_id, a.slice_index, a.x, a.y)):
        digest.update(f"{a.patient_id}:{a.slice_index}:{a.x}:{a.y}:{a.tag.value}".encode())
    for pid in sorted(trials):
        digest.update(f"{pid}={trials[pid].value}".encode())
    return digest.hexdigest()


def _assemble_cached(volumes, annotations, regime, trials) -> list[Sample]:
    """assemble(), memoized on (regime fingerprint, cohort content hash).

    Images are float32 on both the cold and warm paths so a cache hit
    feeds the learner bit-identical matrices.
    """
    cache_root = os.environ.get(CACHE_ENV)
    key = None
    if cache_root:
        key = _cohort_hash(volumes, annotations, trials)
        stem = Path(cache_root) / f"{regime.fingerprint()[:16]}-{key[:16]}"
        tensor_path = stem.with_suffix(".tensor")
        sidecar_path = stem.with_suffix(".json")
        if tensor_path.exists() and sidecar_path.exists():
            stack, fingerprint = load_tensor(tensor_path)
            rows = json.loads(sidecar_path.read_text())
            if fingerprint == regime.fingerprint() and len(rows) == len(stack):
                return [
                    Sample(
                        image=stack[i],
                        label=Label(row["label"]),
                        trial=Trial(row["trial"]),
                        source=(row["patient_id"], row["slice_index"]),
                    )
                    for i, row in enumerate(rows)
                ]
    samples = assemble(volumes, annotations, regime, trials=trials)
    for s in samples:
        s.image = s.image.astype(np.float32)
    if cache_root and samples:
        Path(cache_root).mkdir(parents=True, exist_ok=True)
        stem = Path(cache_root) / f"{regime.fingerprint()[:16]}-{key[:16]}"
        stack = np.stack([s.image for s in samples])
        save_tensor(stem.with_suffix(".tensor"), stack, regime.fingerprint())
        rows = [
            {
                "patient_id": s.source[0],
                "slice_index": s.source[1],
                "label": s.label.value,
                "trial": s.trial.value,
            }
            for s in samples
        ]
        stem.with_suffix(".json").write_text(json.dumps(rows, indent=2) + "\n")
    return samples


def _family_for(image: np.ndarray) -> AugmentSpec:
    rows, cols = image.shape
    if rows == cols:
        return FULL_FAMILY
    # rotations need square inputs; flips and shifts always apply
    return AugmentSpec(rotations=False)


def _augment_samples(samples: list[Sample], family: AugmentSpec) -> list[Sample]:
    out = []
    for s in samples:
        for img in augment_image(s.image, family):
            out.append(Sample(image=img, label=s.label, trial=s.trial, source=s.source))
    return out


def _load_cohort(config: ExperimentConfig, run_dir: Path):
    if config.phantom is not None:
        corpus = run_dir / "corpus"
        if not (corpus / "manifest.json").exists():
            write_corpus(config.phantom, corpus)
        manifest = load_manifest(corpus / "manifest.json")
        annotations = load_annotations(corpus / "annotations.csv")
    else:
        manifest = load_manifest(config.manifest)
        annotations = load_annotations(config.annotations)
    volumes = load_cohort_volumes(manifest)
    return manifest, volumes, annotations


def _fit(config: ExperimentConfig, X: np.ndarray, y: np.ndarray):
    params = dict(config.learner_params)
    if config.learner == "tree":
        return fit_tree(X, y, **params)
    if config.learner == "forest":
        params.setdefault("n_trees", 100)
        return fit_forest(X, y, seed=config.seed + 3, **params)
    kernel = params.pop("kernel", None)
    if kernel is not None:
        try:
            params["kernel"] = KernelKind(str(kernel).lower())
        except ValueError as err:
            raise ConfigError(f"unknown svm kernel {kernel!r}") from err
    return fit_svm(X, y, **params)


def _train_test_pools(config: ExperimentConfig, plan: SplitPlan) -> SplitPlan:
    """Apply the study's augmentation policy to both sides of the split."""
    study = config.study
    train = list(plan.train)
    test = list(plan.test)
    family = _family_for(train[0].image) if train else FULL_FAMILY

    if study.multiclass:
        untampered = [s for s in train if s.label is Label.UNTAMPERED]
        cap = len(untampered)
        rng = np.random.default_rng(config.seed + 4)
        pools = [untampered]
        for cls in (Label.FB, Label.FM):
            pool = _augment_samples([s for s in train if s.label is cls], family)
            if len(pool) > cap:
                picks = rng.choice(len(pool), size=cap, replace=False)
                pool = [pool[i] for i in sorted(picks)]
            pools.append(pool)
        train = [s for pool in pools for s in pool]
    elif study.augmented:
        train = _augment_samples(train, family)

    mode = config.resolved_augment_test()
    if mode == "both":
        test = _augment_samples(test, family)
    elif mode == "tampered":
        tampered = _augment_samples([s for s in test if s.label is not Label.UNTAMPERED], family)
        test = tampered + [s for s in test if s.label is Label.UNTAMPERED]

    return SplitPlan(train=train, test=test, policy=plan.policy, seed=plan.seed)


def run(config: ExperimentConfig) -> tuple[MetricsReport, Path]:
    """Execute the configured experiment; returns the report and its run directory."""
    run_dir = Path(config.output_dir) / config.run_id()
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest, volumes, annotations = _load_cohort(config, run_dir)
    regime = config.regime()
    samples = _assemble_cached(volumes, annotations, regime, manifest.trials())

    if config.study.multiclass:
        label_map = _multiclass_label
    else:
        label_map = _binary_label
        samples = balance(samples, config.seed + 1, merge_tampered=True)

    plan = split(samples, SplitPolicy.TRIAL_BASED, config.seed + 2)
    plan = _train_test_pools(config, plan)

    X = np.stack([flatten(s.image) for s in plan.train]).astype(np.float32)
    y = np.array([label_map(s.label) for s in plan.train])
    model = _fit(config, X, y)

    metadata = {
        "config": config.resolved(),
        "run_id": config.run_id(),
        "train_rows": len(plan.train),
        "test_rows": len(plan.test),
    }
    report = evaluate(model, plan, label_map=label_map, metadata=metadata)
    report.run_metadata["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    write_report(report, run_dir / "report.json")
    write_roc_artifacts(report, run_dir)
    save_model(
        model,
        run_dir / "model.bin",
        metadata={"run_id": config.run_id(), "regime_fingerprint": regime.fingerprint()},
    )
    return report, run_dir
