"""Medical-record schema, [-1,1] normalization, dataset manifests, splits.

The CSV schema is documented in docs/data_format.md. The feature vector width
d is derived from the configured race category set: numeric fields, then
binary fields, then the one-hot race block, all encoded in [-1, 1].
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError, SplitError, StatsError

NUMERIC_FIELDS = (
    "age",
    "height",
    "pre_pregnancy_weight",
    "gravidity",
    "parity",
    "current_weight",
    "gestational_age_at_scan",
)
BINARY_FIELDS = (
    "prior_cs",
    "hist_gest_htn",
    "hist_gdm",
    "hist_preeclampsia",
    "chronic_asthma",
    "chronic_htn",
    "chronic_dm",
)
DEFAULT_RACES = ("asian", "black", "hispanic", "other", "white")

CSV_HEADER = ("participant_id", "race") + NUMERIC_FIELDS + BINARY_FIELDS + ("label",)

GEST_AGE_WINDOW = (31.0, 38.0)  # recruitment window; out-of-range is warn-only


@dataclass(frozen=True)
class RecordSchema:
    races: tuple = DEFAULT_RACES

    @property
    def d(self) -> int:
        return len(NUMERIC_FIELDS) + len(BINARY_FIELDS) + len(self.races)

    def feature_names(self) -> list:
        return list(NUMERIC_FIELDS) + list(BINARY_FIELDS) + [f"race_{r}" for r in self.races]


@dataclass(frozen=True)
class MedicalRecord:
    participant_id: str
    race: str
    age: float
    height: float
    pre_pregnancy_weight: float
    gravidity: float
    parity: float
    prior_cs: int
    hist_gest_htn: int
    hist_gdm: int
    hist_preeclampsia: int
    chronic_asthma: int
    chronic_htn: int
    chronic_dm: int
    current_weight: float
    gestational_age_at_scan: float
    label: int  # 0 = vaginal, 1 = cesarean

    def numeric(self, name: str) -> float:
        return float(getattr(self, name))


def _validate_row(rec: MedicalRecord, where: str) -> MedicalRecord:
    if rec.age < 18:
        raise ValueError(f"{where}: age {rec.age} below 18")
    if rec.parity > rec.gravidity:
        raise ValueError(f"{where}: parity {rec.parity} exceeds gravidity {rec.gravidity}")
    for name in BINARY_FIELDS + ("label",):
        v = getattr(rec, name)
        if v not in (0, 1):
            raise ValueError(f"{where}: {name} must be 0 or 1, got {v}")
    lo, hi = GEST_AGE_WINDOW
    if not (lo <= rec.gestational_age_at_scan <= hi):
        warnings.warn(
            f"{where}: gestational_age_at_scan {rec.gestational_age_at_scan} outside "
            f"recruitment window [{lo}, {hi}]",
            stacklevel=3,
        )
    return rec


def parse_records(path, schema: RecordSchema = RecordSchema()) -> list:
    """Parse and validate the medical-record CSV."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        if set(header) != set(CSV_HEADER):
            missing = set(CSV_HEADER) - set(header)
            extra = set(header) - set(CSV_HEADER)
            raise SchemaError(f"{path}: header mismatch (missing {sorted(missing)}, unknown {sorted(extra)})")
        records = []
        for i, row in enumerate(reader, start=2):  # data starts on line 2
            where = f"{path.name}:{i}"
            try:
                rec = MedicalRecord(
                    participant_id=row["participant_id"].strip(),
                    race=row["race"].strip(),
                    **{f: float(row[f]) for f in NUMERIC_FIELDS},
                    **{f: int(row[f]) for f in BINARY_FIELDS},
                    label=int(row["label"]),
                )
            except (TypeError, ValueError) as e:
                raise ValueError(f"{where}: {e}") from None
            if not rec.participant_id:
                raise ValueError(f"{where}: empty participant_id")
            if rec.race not in schema.races:
                raise ValueError(f"{where}: race {rec.race!r} not in configured set {schema.races}")
            records.append(_validate_row(rec, where))
    return records


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(
                [r.participant_id, r.race]
                + [f"{r.numeric(f):.6g}" for f in NUMERIC_FIELDS]
                + [getattr(r, f) for f in BINARY_FIELDS]
                + [r.label]
            )


# ------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormalizationStats:
    """Per-numeric-field (min, max), computed on training participants only."""

    ranges: dict  # field -> (min, max)

    @staticmethod
    def fit(records) -> "NormalizationStats":
        ranges = {}
        for f in NUMERIC_FIELDS:
            vals = np.array([r.numeric(f) for r in records], dtype=np.float64)
            lo, hi = float(vals.min()), float(vals.max())
            if not lo < hi:
                raise StatsError(f"field {f!r} is constant ({lo}) on the training set; cannot scale")
            ranges[f] = (lo, hi)
        return NormalizationStats(ranges)

    def to_json(self) -> dict:
        return {k: list(v) for k, v in self.ranges.items()}

    @staticmethod
    def from_json(obj: dict) -> "NormalizationStats":
        return NormalizationStats({k: (float(v[0]), float(v[1])) for k, v in obj.items()})


def normalize_records(records, stats: NormalizationStats, schema: RecordSchema = RecordSchema()) -> np.ndarray:
    """Encode records as (n, d) vectors in [-1, 1].

    Numeric: affine min-max to [-1, 1], clamped for out-of-range test values.
    Binary: {0,1} -> {-1,+1}. Race: one-hot block in {-1,+1}.
    """
    n = len(records)
    out = np.empty((n, schema.d), dtype=np.float64)
    col = 0
    for f in NUMERIC_FIELDS:
        if f not in stats.ranges:
            raise StatsError(f"normalization stats missing field {f!r}")
        lo, hi = stats.ranges[f]
        x = np.array([r.numeric(f) for r in records], dtype=np.float64)
        out[:, col] = np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0)
        col += 1
    for f in BINARY_FIELDS:
        out[:, col] = [2.0 * getattr(r, f) - 1.0 for r in records]
        col += 1
    for race in schema.races:
        out[:, col] = [1.0 if r.race == race else -1.0 for r in records]
        col += 1
    return out


# ------------------------------------------------------------------ manifest

@dataclass(frozen=True)
class ScanEntry:
    participant_id: str
    scan_id: str
    proj_dir: str


@dataclass(frozen=True)
class DatasetManifest:
    records_csv: str
    entries: tuple = field(default=())

    def participants(self) -> list:
        seen = dict.fromkeys(e.participant_id for e in self.entries)
        return list(seen)

    def scans_of(self, participant_id: str) -> list:
        return [e for e in self.entries if e.participant_id == participant_id]


def save_manifest(manifest: DatasetManifest, path) -> None:
    obj = {
        "records_csv": manifest.records_csv,
        "entries": [
            {"participant_id": e.participant_id, "scan_id": e.scan_id, "proj_dir": e.proj_dir}
            for e in manifest.entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        obj = json.load(fh)
    entries = tuple(ScanEntry(e["participant_id"], e["scan_id"], e["proj_dir"]) for e in obj["entries"])
    return DatasetManifest(records_csv=obj["records_csv"], entries=entries)


def validate_manifest(manifest: DatasetManifest, root: Path | None = None) -> None:
    """Every scan must reference an existing projection dir; every participant >= 1 scan."""
    if not manifest.entries:
        raise DataError("manifest has no scan entries")
    root = Path(root) if root else Path(".")
    for e in manifest.entries:
        d = Path(e.proj_dir)
        if not d.is_absolute():
            d = root / d
        if not (d / "manifest.json").exists():
            raise DataError(f"scan {e.scan_id}: projection directory {d} missing or unrendered")


# -------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitPlan:
    seed: int
    test_participants: tuple
    cv_folds: tuple  # of (train tuple, val tuple)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "test_participants": list(self.test_participants),
            "cv_folds": [{"train": list(tr), "val": list(va)} for tr, va in self.cv_folds],
        }

    @staticmethod
    def from_json(obj: dict) -> "SplitPlan":
        return SplitPlan(
            seed=int(obj["seed"]),
            test_participants=tuple(obj["test_participants"]),
            cv_folds=tuple((tuple(f["train"]), tuple(f["val"])) for f in obj["cv_folds"]),
        )


def make_splits(labels_by_participant: dict, seed: int, n_folds: int = 5, test_frac: float = 0.25) -> SplitPlan:
    """Participant-level, label-stratified test split plus K folds.

    Deterministic under seed and invariant to input ordering (participants are
    sorted before shuffling).
    """
    by_class: dict = {0: [], 1: []}
    for pid in sorted(labels_by_participant):
        by_class[int(labels_by_participant[pid])].append(pid)
    rng = np.random.default_rng(seed)
    test, pool = [], {0: [], 1: []}
    for cls in (0, 1):
        ids = by_class[cls]
        perm = [ids[i] for i in rng.permutation(len(ids))]
        k = int(round(test_frac * len(ids)))
        test.extend(perm[:k])
        pool[cls] = perm[k:]
        if len(pool[cls]) < n_folds:
            raise SplitError(
                f"class {cls}: only {len(pool[cls])} participants left for {n_folds}-fold CV"
            )
    folds_val: list = [[] for _ in range(n_folds)]
    for cls in (0, 1):
        for i, pid in enumerate(pool[cls]):
            folds_val[i % n_folds].append(pid)
    cv_all = sorted(pool[0] + pool[1])
    cv_folds = []
    for val in folds_val:
        val_set = set(val)
        train = tuple(p for p in cv_all if p not in val_set)
        cv_folds.append((train, tuple(sorted(val))))
    return SplitPlan(seed=seed, test_participants=tuple(sorted(test)), cv_folds=tuple(cv_folds))


def labels_from_records(records) -> dict:
    """participant_id -> label, asserting label consistency across scans."""
    labels: dict = {}
    for r in records:
        prev = labels.get(r.participant_id)
        if prev is not None and prev != r.label:
            raise DataError(f"participant {r.participant_id} has conflicting labels")
        labels[r.participant_id] = r.label
    return labels
