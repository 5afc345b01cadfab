"""Label taxonomies, dataset manifests, the persistent random split and corpus statistics."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DuplicateId, LabelError, TooFew

SHEMO6 = ("anger", "fear", "happiness", "neutral", "sadness", "surprise")
SRC4 = ("anger", "happiness", "neutral", "sadness")
LABEL_SETS = {"SHEMO6": SHEMO6, "SRC4": SRC4}
LABEL_ALIASES = {"joy": "happiness"}

MANIFEST_COLUMNS = ("utterance_id", "audio_path", "label", "speaker_id", "gender", "split")
SPLITS = ("train", "val", "test", "unassigned")
GENDERS = ("F", "M", "unknown")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class LabelSet:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise LabelError("a label set needs at least one name")
        dupes = sorted(n for n, c in Counter(names).items() if c > 1)
        if dupes:
            raise LabelError(f"duplicate labels: {dupes}")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LabelError(f"label {name!r} is not in {list(self.names)}") from None

    def canonical(self, name: str) -> str:
        """Map an alias (``joy``) to its canonical name when the canonical name is in the set."""
        alias = LABEL_ALIASES.get(name)
        return alias if alias is not None and alias in self.names and name not in self.names else name


def resolve_labels(spec) -> LabelSet:
    """``"SHEMO6"``, ``"SRC4"``, ``"a,b,c"`` or an iterable of names."""
    if isinstance(spec, LabelSet):
        return spec
    if isinstance(spec, str):
        if spec.upper() in LABEL_SETS:
            return LabelSet(LABEL_SETS[spec.upper()])
        return LabelSet(tuple(s.strip() for s in spec.split(",") if s.strip()))
    return LabelSet(tuple(spec))


@dataclass(frozen=True)
class Record:
    utterance_id: str
    audio_path: str
    label: str
    speaker_id: str = ""
    gender: str = "unknown"
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    records: list
    label_set: LabelSet
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.utterance_id in seen:
                raise DuplicateId(f"duplicate utterance_id {r.utterance_id!r}")
            seen.add(r.utterance_id)
            if r.label not in self.label_set:
                raise LabelError(f"{r.utterance_id}: label {r.label!r} not in {list(self.label_set)}")

    def __len__(self):
        return len(self.records)

    def subset(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def audio_file(self, record: Record) -> Path:
        p = Path(record.audio_path)
        return p if p.is_absolute() else self.root / p

    def split_counts(self) -> dict:
        counts = Counter(r.split for r in self.records)
        return {s: counts.get(s, 0) for s in SPLITS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in self.records:
            writer.writerow([r.utterance_id, r.audio_path, r.label, r.speaker_id, r.gender, r.split])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def parse_manifest(text: str, label_set, root=Path()) -> DatasetManifest:
    label_set = resolve_labels(label_set)
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in MANIFEST_COLUMNS[:5] if c not in (reader.fieldnames or [])]
    if reader.fieldnames is None:
        return DatasetManifest([], label_set, Path(root))
    if missing:
        raise ValueError(f"manifest header lacks columns {missing}")
    records, seen = [], set()
    for row_no, row in enumerate(reader, start=2):
        label = row["label"].strip()
        if label not in label_set:
            raise LabelError(f"row {row_no}: label {label!r} not in {list(label_set)}"
                             + (f" (canonical name is {LABEL_ALIASES[label]!r})" if label in LABEL_ALIASES else ""))
        uid = row["utterance_id"].strip()
        if uid in seen:
            raise DuplicateId(f"row {row_no}: duplicate utterance_id {uid!r}")
        seen.add(uid)
        gender = (row.get("gender") or "unknown").strip() or "unknown"
        split = (row.get("split") or "unassigned").strip() or "unassigned"
        if gender not in GENDERS:
            raise ValueError(f"row {row_no}: gender must be one of {GENDERS}, got {gender!r}")
        if split not in SPLITS:
            raise ValueError(f"row {row_no}: split must be one of {SPLITS}, got {split!r}")
        records.append(Record(uid, row["audio_path"].strip(), label,
                              (row.get("speaker_id") or "").strip(), gender, split))
    return DatasetManifest(records, label_set, Path(root))


def load_manifest(path, label_set) -> DatasetManifest:
    """Read a manifest CSV; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), label_set, root=path.parent)


def canonicalize_labels(manifest_text: str, label_set) -> str:
    """Rewrite aliased labels (``joy`` -> ``happiness``) in raw manifest CSV text."""
    label_set = resolve_labels(label_set)
    reader = csv.DictReader(io.StringIO(manifest_text))
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=reader.fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in reader:
        row["label"] = label_set.canonical(row["label"].strip())
        writer.writerow(row)
    return out.getvalue()


def split_sizes(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    n_train = int(np.floor(ratios[0] * n + 1e-9))
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0,
          stratified: bool = False) -> DatasetManifest:
    """Assign train/val/test by a seeded uniform permutation.

    Sizes are ``floor(0.8 n)``, ``floor(0.1 n)`` and the remainder. The
    stratified variant applies the same rule within each label.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(manifest)
    if n < 3:
        raise TooFew(f"need at least 3 records to split, got {n}")
    rng = np.random.default_rng(seed)
    assignment = [""] * n
    groups = [list(range(n))]
    if stratified:
        by_label: dict[str, list] = {}
        for i, r in enumerate(manifest.records):
            by_label.setdefault(r.label, []).append(i)
        groups = [by_label[k] for k in sorted(by_label)]
    for members in groups:
        order = rng.permutation(len(members))
        n_train, n_val, _ = split_sizes(len(members), ratios)
        for rank, j in enumerate(order):
            assignment[members[j]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    records = [replace(r, split=s) for r, s in zip(manifest.records, assignment)]
    return DatasetManifest(records, manifest.label_set, manifest.root)


@dataclass
class DatasetStats:
    label_counts: dict
    n_records: int
    duration_min: float | None = None
    duration_max: float | None = None
    duration_mean: float | None = None
    duration_std: float | None = None
    label_duration_mean: dict = field(default_factory=dict)
    speakers_by_gender: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def class_stats(manifest: DatasetManifest, durations=None) -> DatasetStats:
    """Per-label counts, duration summary (population std) and speakers per gender."""
    counts = Counter(r.label for r in manifest.records)
    label_counts = {name: counts.get(name, 0) for name in manifest.label_set}
    speakers: dict[str, set] = {}
    for r in manifest.records:
        if r.speaker_id:
            speakers.setdefault(r.gender, set()).add(r.speaker_id)
    stats = DatasetStats(label_counts, len(manifest),
                         speakers_by_gender={g: len(s) for g, s in sorted(speakers.items())})
    if durations is not None:
        d = np.asarray(durations, dtype=np.float64)
        if d.shape != (len(manifest),):
            raise ValueError(f"{d.shape[0]} durations for {len(manifest)} records")
        if d.size:
            stats.duration_min = float(d.min())
            stats.duration_max = float(d.max())
            stats.duration_mean = float(d.mean())
            stats.duration_std = float(d.std())
            labels = np.array([r.label for r in manifest.records])
            stats.label_duration_mean = {name: float(d[labels == name].mean())
                                         for name in manifest.label_set if np.any(labels == name)}
    return stats
