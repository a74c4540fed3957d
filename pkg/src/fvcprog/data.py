"""Data model, file ingestion, clinical encoding, synthetic data, k-fold splits.

On-disk layout: a clinical CSV with the exact header
``patient_id,weeks,fvc,age,sex,smoking_status`` plus one directory per
patient holding a manifest.json ({"patient_id", "slices", "keep_range"})
and 16-bit PGM CT slices. Synthetic datasets with phantom lungs cover the
same formats for desk-scale testing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import pgmio
from .errors import DataError

CSV_HEADER = ["patient_id", "weeks", "fvc", "age", "sex", "smoking_status"]

AGE_BOUNDS = (18, 120)


class Sex(Enum):
    MALE = "Male"
    FEMALE = "Female"


class Smoking(Enum):
    CURRENTLY_SMOKES = "Currently smokes"
    EX_SMOKER = "Ex-smoker"
    NEVER_SMOKED = "Never smoked"


# 2-bit smoking code (bit1, bit0); (1, 1) is reserved/invalid
SMOKING_BITS = {
    Smoking.NEVER_SMOKED: (0, 0),
    Smoking.EX_SMOKER: (0, 1),
    Smoking.CURRENTLY_SMOKES: (1, 0),
}

SEX_CODE = {Sex.MALE: 1, Sex.FEMALE: 0}


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    age: int
    sex: Sex
    smoking: Smoking

    def __post_init__(self) -> None:
        lo, hi = AGE_BOUNDS
        if not lo <= self.age <= hi:
            raise ValueError(f"age {self.age} outside plausible bounds [{lo}, {hi}]")


@dataclass(frozen=True)
class FvcSeries:
    """Chronological (week, FVC mL) measurements; at least two, FVC > 0."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise ValueError(f"FVC series needs >= 2 points, got {len(self.points)}")
        t = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("FVC series timestamps must be strictly increasing")
        if any(p[1] <= 0 for p in self.points):
            raise ValueError("FVC values must be positive")

    @property
    def times(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def values(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)

    def rezeroed_times(self) -> np.ndarray:
        """Weeks shifted so the first measurement sits at t = 0."""
        t = self.times
        return t - t[0]

    @property
    def baseline(self) -> float:
        return float(self.points[0][1])


@dataclass
class CtVolume:
    """Ordered CT slice stack (HU) plus the reviewed keep range."""

    slices: np.ndarray  # (depth, h, w), HU
    keep_range: tuple[int, int]

    def __post_init__(self) -> None:
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3:
            raise ValueError(f"expected (depth, h, w) stack, got {self.slices.shape}")
        top, bottom = self.keep_range
        depth = self.slices.shape[0]
        if not 0 <= top <= bottom < depth:
            raise ValueError(f"keep_range {self.keep_range} out of bounds for depth {depth}")

    @property
    def depth(self) -> int:
        return int(self.slices.shape[0])

    def kept_indices(self) -> range:
        top, bottom = self.keep_range
        return range(top, bottom + 1)

    def kept_slices(self) -> np.ndarray:
        top, bottom = self.keep_range
        return self.slices[top:bottom + 1]


@dataclass
class PatientSample:
    clinical: ClinicalRecord
    volume: CtVolume
    fvc: FvcSeries

    @property
    def patient_id(self) -> str:
        return self.clinical.patient_id


@dataclass(frozen=True)
class NormStats:
    """Age normalization statistics, computed on the training fold only."""

    age_min: float
    age_max: float

    def __post_init__(self) -> None:
        if not self.age_min < self.age_max:
            raise ValueError(f"age_min must be < age_max, got {self.age_min}, {self.age_max}")

    @classmethod
    def from_records(cls, records: Iterable[ClinicalRecord]) -> "NormStats":
        ages = [r.age for r in records]
        if not ages:
            raise ValueError("no records to compute normalization stats")
        lo, hi = float(min(ages)), float(max(ages))
        if lo == hi:
            hi = lo + 1.0  # degenerate fold; keep the denominator finite
        return cls(age_min=lo, age_max=hi)


def encode_clinical(record: ClinicalRecord, stats: NormStats) -> np.ndarray:
    """Four-value clinical vector: [age_norm, sex_code, smoke_bit1, smoke_bit0]."""
    age_norm = (record.age - stats.age_min) / (stats.age_max - stats.age_min)
    age_norm = min(max(age_norm, 0.0), 1.0)
    bit1, bit0 = SMOKING_BITS[record.smoking]
    return np.array([age_norm, SEX_CODE[record.sex], bit1, bit0], dtype=np.float64)


# ---------------------------------------------------------------------------
# clinical CSV


def _parse_enum(cls, raw: str, row_num: int, what: str):
    for member in cls:
        if member.value == raw:
            return member
    raise DataError(f"unknown {what} {raw!r}, row {row_num}")


def parse_clinical_csv(path: str | Path) -> list[tuple[str, float, float, ClinicalRecord]]:
    """Parse the clinical CSV into (patient_id, week, fvc, record) tuples.

    Duplicate (patient_id, week) rows are merged by averaging FVC. Errors
    name the offending data row (header is row 1).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"clinical CSV not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"empty clinical CSV: {path}") from None
        if header != CSV_HEADER:
            raise DataError(f"bad CSV header {header!r}, expected {CSV_HEADER!r}")
        merged: dict[tuple[str, float], list] = {}
        order: list[tuple[str, float]] = []
        records: dict[str, tuple[ClinicalRecord, int]] = {}
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"expected {len(CSV_HEADER)} columns, "
                                f"got {len(row)}, row {row_num}")
            pid, weeks_s, fvc_s, age_s, sex_s, smoking_s = [c.strip() for c in row]
            try:
                week = float(weeks_s)
                fvc = float(fvc_s)
            except ValueError:
                raise DataError(f"non-numeric weeks/fvc, row {row_num}") from None
            try:
                age = int(age_s)
            except ValueError:
                raise DataError(f"non-integer age {age_s!r}, row {row_num}") from None
            sex = _parse_enum(Sex, sex_s, row_num, "sex")
            smoking = _parse_enum(Smoking, smoking_s, row_num, "smoking status")
            try:
                record = ClinicalRecord(patient_id=pid, age=age, sex=sex, smoking=smoking)
            except ValueError as exc:
                raise DataError(f"{exc}, row {row_num}") from None
            if pid in records:
                if records[pid][0] != record:
                    raise DataError(f"clinical fields for {pid!r} differ from "
                                    f"row {records[pid][1]}, row {row_num}")
            else:
                records[pid] = (record, row_num)
            key = (pid, week)
            if key not in merged:
                merged[key] = []
                order.append(key)
            merged[key].append(fvc)
    return [(pid, week, float(np.mean(merged[(pid, week)])), records[pid][0])
            for pid, week in order]


def group_fvc_series(rows: Sequence[tuple[str, float, float, ClinicalRecord]]
                     ) -> dict[str, tuple[ClinicalRecord, FvcSeries]]:
    """Group parsed rows into per-patient chronological FVC series."""
    by_pid: dict[str, list[tuple[float, float]]] = {}
    record_of: dict[str, ClinicalRecord] = {}
    for pid, week, fvc, record in rows:
        by_pid.setdefault(pid, []).append((week, fvc))
        record_of[pid] = record
    out = {}
    for pid, points in by_pid.items():
        points.sort(key=lambda p: p[0])
        try:
            out[pid] = (record_of[pid], FvcSeries(points=tuple(points)))
        except ValueError as exc:
            raise DataError(f"patient {pid!r}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# CT manifests


def load_ct_stack(manifest_path: str | Path) -> CtVolume:
    """Load a CT stack from a manifest JSON listing slice files in order."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"bad manifest JSON {manifest_path}: {exc}") from exc
    for key in ("patient_id", "slices", "keep_range"):
        if key not in manifest:
            raise DataError(f"manifest {manifest_path} missing key {key!r}")
    rel_paths = manifest["slices"]
    if not rel_paths:
        raise DataError(f"manifest {manifest_path} lists no slices")
    slices = []
    base = manifest_path.parent
    for rel in rel_paths:
        slice_path = base / rel
        if not slice_path.exists():
            raise DataError(f"slice file not found: {slice_path}")
        slices.append(pgmio.read_hu_slice(slice_path))
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise DataError(f"slice dimension mismatch in {manifest_path}: {sorted(shapes)}")
    top, bottom = manifest["keep_range"]
    try:
        return CtVolume(slices=np.stack(slices), keep_range=(int(top), int(bottom)))
    except ValueError as exc:
        raise DataError(f"{manifest_path}: {exc}") from None


def load_dataset(root: str | Path) -> list[PatientSample]:
    """Load clinical.csv plus per-patient manifests under root, sorted by id."""
    root = Path(root)
    rows = parse_clinical_csv(root / "clinical.csv")
    grouped = group_fvc_series(rows)
    samples = []
    for pid in sorted(grouped):
        record, series = grouped[pid]
        manifest = root / pid / "manifest.json"
        volume = load_ct_stack(manifest)
        samples.append(PatientSample(clinical=record, volume=volume, fvc=series))
    return samples


# ---------------------------------------------------------------------------
# synthetic data

BASELINE_FVC_MEAN = 2690.47
BASELINE_FVC_SD = 832.77
BASELINE_FVC_RANGE = (827.0, 6399.0)
AGE_RANGE = (49, 88)
SLOPE_MEAN = -4.0
SLOPE_SD = 3.0
SLOPE_RANGE = (-15.0, 5.0)


@dataclass(frozen=True)
class SynthSpec:
    patients: int = 8
    slices_per_patient: int = 6
    image_size: int = 64
    visits: int = 6

    def __post_init__(self) -> None:
        if self.patients < 1:
            raise ValueError("patients must be >= 1")
        if self.visits < 2:
            raise ValueError("visits must be >= 2")
        if self.slices_per_patient < 1:
            raise ValueError("slices_per_patient must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")


def render_phantom_slice(h: int, w: int, lung_scale: float, roughness: float,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One phantom CT slice: soft-tissue body, ambient air, two dark lungs.

    Returns (hu, truth) where truth marks the lung ellipse pixels. Lung
    texture noise grows with roughness, standing in for fibrotic change.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    hu = np.full((h, w), 40.0) + rng.normal(0.0, 5.0, size=(h, w))
    body = ((yy - cy) / (0.46 * h)) ** 2 + ((xx - cx) / (0.46 * w)) ** 2 <= 1.0
    hu[~body] = -1000.0
    truth = np.zeros((h, w), dtype=bool)
    if lung_scale > 0:
        for side in (-1.0, 1.0):
            lx = cx + side * 0.18 * w
            a = 0.30 * h * lung_scale
            b = 0.13 * w * lung_scale
            lung = ((yy - cy) / a) ** 2 + ((xx - lx) / b) ** 2 <= 1.0
            lung &= body
            truth |= lung
        texture = rng.normal(-830.0, 10.0 + 3.0 * roughness, size=(h, w))
        hu[truth] = np.clip(texture[truth], -1000.0, -600.0)
    return np.rint(hu).astype(np.int32), truth


def _truncated_normal(rng: np.random.Generator, mean: float, sd: float,
                      lo: float, hi: float) -> float:
    while True:
        x = rng.normal(mean, sd)
        if lo <= x <= hi:
            return float(x)


def generate_synthetic(spec: SynthSpec, seed: int) -> list[PatientSample]:
    """Deterministic phantom dataset whose marginals follow the study table."""
    children = np.random.SeedSequence(seed).spawn(spec.patients)
    samples = []
    for idx in range(spec.patients):
        rng = np.random.default_rng(children[idx])
        pid = f"SP{idx:03d}"
        age = int(rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1))
        sex = Sex.MALE if rng.random() < 0.79 else Sex.FEMALE
        u = rng.random()
        if u < 0.05:
            smoking = Smoking.CURRENTLY_SMOKES
        elif u < 0.72:
            smoking = Smoking.EX_SMOKER
        else:
            smoking = Smoking.NEVER_SMOKED
        record = ClinicalRecord(patient_id=pid, age=age, sex=sex, smoking=smoking)

        baseline = _truncated_normal(rng, BASELINE_FVC_MEAN, BASELINE_FVC_SD,
                                     *BASELINE_FVC_RANGE)
        slope = float(np.clip(rng.normal(SLOPE_MEAN, SLOPE_SD), *SLOPE_RANGE))

        gaps = rng.integers(4, 13, size=spec.visits - 1)
        times = np.concatenate([[0.0], np.cumsum(gaps)]).astype(np.float64)
        noise = rng.normal(0.0, 12.0, size=spec.visits)
        values = np.maximum(np.rint(baseline + slope * times + noise), 300.0)
        series = FvcSeries(points=tuple(zip(times.tolist(), values.tolist())))

        depth = spec.slices_per_patient
        roughness = abs(slope)
        stack = []
        for k in range(depth):
            frac = (k + 0.5) / depth
            lung_scale = float(np.sin(np.pi * frac))
            if depth >= 3 and (k == 0 or k == depth - 1):
                lung_scale *= 0.4  # edge slices carry little relevant anatomy
            hu, _ = render_phantom_slice(spec.image_size, spec.image_size,
                                         lung_scale, roughness, rng)
            stack.append(hu)
        keep = (1, depth - 2) if depth >= 3 else (0, depth - 1)
        volume = CtVolume(slices=np.stack(stack), keep_range=keep)
        samples.append(PatientSample(clinical=record, volume=volume, fvc=series))
    return samples


def write_dataset(samples: Sequence[PatientSample], out_dir: str | Path,
                  comments: tuple[str, ...] = ()) -> None:
    """Persist samples in the on-disk layout (clinical.csv + manifests + PGM)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "clinical.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for sample in sorted(samples, key=lambda s: s.patient_id):
            rec = sample.clinical
            for week, fvc in sample.fvc.points:
                week_s = f"{int(week)}" if week == int(week) else f"{week}"
                fvc_s = f"{int(fvc)}" if fvc == int(fvc) else f"{fvc}"
                writer.writerow([rec.patient_id, week_s, fvc_s, rec.age,
                                 rec.sex.value, rec.smoking.value])
    for sample in samples:
        pdir = out_dir / sample.patient_id
        pdir.mkdir(exist_ok=True)
        rel_paths = []
        for k in range(sample.volume.depth):
            rel = f"slice_{k:03d}.pgm"
            pgmio.write_hu_slice(pdir / rel, sample.volume.slices[k], comments=comments)
            rel_paths.append(rel)
        manifest = {
            "patient_id": sample.patient_id,
            "slices": rel_paths,
            "keep_range": list(sample.volume.keep_range),
        }
        (pdir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# fold construction


def kfold_split(patients: Sequence[PatientSample], k: int, seed: int
                ) -> list[tuple[list[PatientSample], list[PatientSample]]]:
    """Patient-level k-fold partition; test sets are disjoint and exhaustive."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(patients) < k:
        raise ValueError(f"need at least k={k} patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    chunks = np.array_split(order, k)
    folds = []
    for chunk in chunks:
        test_idx = set(int(i) for i in chunk)
        train = [patients[i] for i in range(len(patients)) if i not in test_idx]
        test = [patients[int(i)] for i in chunk]
        folds.append((train, test))
    return folds
