"""Cohort assembly: annotation parsing, labeling, balancing, train/test splits.

An annotation names one site on one slice of one patient. Assembly turns
each annotation into a preprocessed sample; tampered samples additionally
carry the trial provenance (blind or open) recorded in the cohort manifest.
Sample identity is the (patient_id, slice_index) source pair throughout:
splits never place the same source on both sides.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dicomio import ScanVolume, load_volume
from .preprocess import PreprocessRegime, apply_regime

ANNOTATION_HEADER = ["patient_id", "slice", "x", "y", "tag"]


class CohortError(Exception):
    pass


class MalformedRow(CohortError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        super().__init__(f"line {line}: {reason}" if reason else f"line {line}")


class UnknownTag(CohortError):
    def __init__(self, line: int, tag: str = ""):
        self.line = line
        super().__init__(f"line {line}: unknown tag {tag!r}")


class UnresolvedAnnotation(CohortError):
    def __init__(self, patient_id: str, reason: str = ""):
        self.patient_id = patient_id
        super().__init__(f"{patient_id}: {reason}" if reason else patient_id)


class ClassTooSmall(CohortError):
    pass


class MissingTrial(CohortError):
    def __init__(self, patient_id: str):
        self.patient_id = patient_id
        super().__init__(f"tampered patient {patient_id} has no blind/open trial assignment")


class ManifestMismatch(CohortError):
    pass


class Tag(str, Enum):
    FB = "FB"
    FM = "FM"
    NODULE = "NODULE"


class Label(str, Enum):
    UNTAMPERED = "UNTAMPERED"
    FB = "FB"
    FM = "FM"


class Trial(str, Enum):
    BLIND = "BLIND"
    OPEN = "OPEN"
    NA = "NA"


class SplitPolicy(str, Enum):
    TRIAL_BASED = "TRIAL_BASED"
    RATIO_85_15 = "RATIO_85_15"


TAG_TO_LABEL = {Tag.FB: Label.FB, Tag.FM: Label.FM, Tag.NODULE: Label.UNTAMPERED}

TAMPERED_LABELS = (Label.FB, Label.FM)


@dataclass(frozen=True)
class Annotation:
    patient_id: str
    slice_index: int
    x: int
    y: int
    tag: Tag


@dataclass(eq=False)
class Sample:
    """One labeled, preprocessed image traceable to its slice of origin."""

    image: np.ndarray
    label: Label
    trial: Trial
    source: tuple[str, int]

    def __post_init__(self):
        if self.label is Label.UNTAMPERED and self.trial is not Trial.NA:
            raise CohortError("untampered samples carry trial NA")

    @property
    def patient_id(self) -> str:
        return self.source[0]

    @property
    def slice_index(self) -> int:
        return self.source[1]


@dataclass(frozen=True)
class ClassCounts:
    untampered: int
    fb: int
    fm: int

    @property
    def total(self) -> int:
        return self.untampered + self.fb + self.fm


@dataclass
class SplitPlan:
    train: list[Sample]
    test: list[Sample]
    policy: SplitPolicy
    seed: int

    def __post_init__(self):
        overlap = {s.source for s in self.train} & {s.source for s in self.test}
        if overlap:
            raise CohortError(f"sources on both split sides: {sorted(overlap)[:3]}")


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    directory: str
    trial: Trial
    label: str | None = None


@dataclass(frozen=True)
class CohortManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    def trials(self) -> dict[str, Trial]:
        return {e.patient_id: e.trial for e in self.entries}

    def directories(self) -> list[Path]:
        return [self.root / e.directory for e in self.entries]


def load_annotations(path: str | Path) -> list[Annotation]:
    """Parse the annotation CSV: header patient_id,slice,x,y,tag.

    Line numbers in errors count from 1 and include the header line.
    """
    out: list[Annotation] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "empty file") from None
        if [h.strip() for h in header] != ANNOTATION_HEADER:
            raise MalformedRow(1, f"bad header {header}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise MalformedRow(line, f"expected 5 fields, got {len(row)}")
            pid, slice_s, x_s, y_s, tag_s = (v.strip() for v in row)
            try:
                slice_idx, x, y = int(slice_s), int(x_s), int(y_s)
            except ValueError:
                raise MalformedRow(line, f"non-integer coordinate in {row}") from None
            if not pid:
                raise MalformedRow(line, "empty patient_id")
            if slice_idx < 0 or x < 0 or y < 0:
                raise MalformedRow(line, "negative coordinate")
            try:
                tag = Tag(tag_s)
            except ValueError:
                raise UnknownTag(line, tag_s) from None
            out.append(Annotation(pid, slice_idx, x, y, tag))
    return out


def write_annotations(path: str | Path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for a in annotations:
            writer.writerow([a.patient_id, a.slice_index, a.x, a.y, a.tag.value])


def load_manifest(path: str | Path) -> CohortManifest:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise ManifestMismatch(f"unsupported manifest schema {doc.get('schema_version')!r}")
    entries = tuple(
        ManifestEntry(
            patient_id=p["patient_id"],
            directory=p["directory"],
            trial=Trial(p.get("trial", "NA")),
            label=p.get("label"),
        )
        for p in doc["patients"]
    )
    return CohortManifest(root=path.parent, entries=entries)


def load_cohort_volumes(manifest: CohortManifest) -> dict[str, ScanVolume]:
    volumes: dict[str, ScanVolume] = {}
    for entry in manifest.entries:
        vol = load_volume(manifest.root / entry.directory)
        if vol.patient_id != entry.patient_id:
            raise ManifestMismatch(
                f"{entry.directory}: manifest says {entry.patient_id}, slices say {vol.patient_id}"
            )
        volumes[vol.patient_id] = vol
    return volumes


def assemble(
    volumes: Iterable[ScanVolume] | Mapping[str, ScanVolume],
    annotations: Iterable[Annotation],
    regime: PreprocessRegime,
    trials: Mapping[str, Trial] | None = None,
) -> list[Sample]:
    """One sample per annotation, preprocessed under the given regime.

    Tampered samples take their blind/open trial from `trials`; with no
    provenance available they carry NA, which a trial-based split rejects.
    """
    if not isinstance(volumes, Mapping):
        volumes = {v.patient_id: v for v in volumes}
    samples: list[Sample] = []
    for a in annotations:
        vol = volumes.get(a.patient_id)
        if vol is None:
            raise UnresolvedAnnotation(a.patient_id, "no volume for patient")
        if a.slice_index >= len(vol):
            raise UnresolvedAnnotation(
                a.patient_id, f"slice {a.slice_index} outside volume of {len(vol)}"
            )
        label = TAG_TO_LABEL[a.tag]
        if label is Label.UNTAMPERED:
            trial = Trial.NA
        else:
            trial = trials.get(a.patient_id, Trial.NA) if trials else Trial.NA
            if trial not in (Trial.BLIND, Trial.OPEN):
                trial = Trial.NA
        image = apply_regime(vol.slices[a.slice_index], a.x, a.y, regime)
        samples.append(Sample(image=image, label=label, trial=trial, source=(a.patient_id, a.slice_index)))
    return samples


def class_counts(samples: Iterable[Sample]) -> ClassCounts:
    tally = {Label.UNTAMPERED: 0, Label.FB: 0, Label.FM: 0}
    for s in samples:
        tally[s.label] += 1
    return ClassCounts(untampered=tally[Label.UNTAMPERED], fb=tally[Label.FB], fm=tally[Label.FM])


def balance(samples: list[Sample], seed: int, merge_tampered: bool = False) -> list[Sample]:
    """Downsample the untampered majority to the tampered pool size.

    Tampered samples are never dropped. With merge_tampered the target is
    the combined FB+FM pool (binary studies); otherwise the smallest
    represented tampered class. Selection is uniform without replacement
    and deterministic in (input, seed); input order is preserved.
    """
    counts = class_counts(samples)
    tampered_sizes = [n for n in (counts.fb, counts.fm) if n > 0]
    if not tampered_sizes:
        return list(samples)
    target = counts.fb + counts.fm if merge_tampered else min(tampered_sizes)
    if counts.untampered <= target:
        return list(samples)
    untampered_positions = [i for i, s in enumerate(samples) if s.label is Label.UNTAMPERED]
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(len(untampered_positions), size=target, replace=False).tolist())
    kept_positions = {untampered_positions[i] for i in keep}
    return [
        s
        for i, s in enumerate(samples)
        if s.label is not Label.UNTAMPERED or i in kept_positions
    ]


def _ratio_split_groups(
    groups: list[list[Sample]], rng: np.random.Generator, ratio: float
) -> tuple[list[Sample], list[Sample]]:
    # Groups (same-source samples) stay together; fractional counts round
    # to nearest with halves toward train, capped so at least one group
    # lands in test.
    n = len(groups)
    n_train = min(math.floor(ratio * n + 0.5), n - 1)
    order = rng.permutation(n)
    train_idx = set(order[:n_train].tolist())
    train: list[Sample] = []
    test: list[Sample] = []
    for i, group in enumerate(groups):
        (train if i in train_idx else test).extend(group)
    return train, test


def _group_by_source(samples: list[Sample]) -> list[list[Sample]]:
    groups: dict[tuple[str, int], list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.source, []).append(s)
    return list(groups.values())


def split(
    samples: list[Sample],
    policy: SplitPolicy,
    seed: int,
    ratio: float = 0.85,
) -> SplitPlan:
    """Partition samples for training and testing.

    RATIO_85_15 stratifies per class. TRIAL_BASED sends tampered blind
    samples to train and open samples to test, and falls back to the ratio
    rule for untampered samples (which carry no trial).
    """
    rng = np.random.default_rng(seed)
    train: list[Sample] = []
    test: list[Sample] = []
    by_label: dict[Label, list[Sample]] = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)

    for label in (Label.UNTAMPERED, Label.FB, Label.FM):
        members = by_label.get(label, [])
        if not members:
            continue
        if policy is SplitPolicy.TRIAL_BASED and label in TAMPERED_LABELS:
            for s in members:
                if s.trial is Trial.BLIND:
                    train.append(s)
                elif s.trial is Trial.OPEN:
                    test.append(s)
                else:
                    raise MissingTrial(s.patient_id)
            continue
        groups = _group_by_source(members)
        if len(groups) < 2:
            raise ClassTooSmall(f"{label.value} has {len(groups)} source(s); need >= 2")
        tr, te = _ratio_split_groups(groups, rng, ratio)
        train.extend(tr)
        test.extend(te)
    return SplitPlan(train=train, test=test, policy=policy, seed=seed)
