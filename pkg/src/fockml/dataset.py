"""Labelled correlation-feature corpora over the (Fock level, QLP, events) grid."""

from __future__ import annotations

import configparser
import hashlib
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .correlator import FEATURE_DIM, TAU_MAX, g3_map, preprocess
from .source import FOCK_LEVELS, SourceSpec, simulate
from .theory import PhotonClass, label_for

log = logging.getLogger(__name__)

QLP_GRID_MILLI = tuple(range(0, 1001, 50))
EVENTS_GRID = tuple(range(100, 10_001, 100)) + tuple(range(11_000, 100_001, 1_000))
DESK_QLP_MILLI = (0, 250, 750, 1000)
DESK_EVENTS = tuple(range(1_000, 10_001, 1_000))
DESK_EXTENDED_EVENTS = tuple(range(100, 1_000, 100)) + DESK_EVENTS

DATASET_MAGIC = b"FLDS"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHQH")
SAMPLE_DTYPE = np.dtype([
    ("label", "u1"),
    ("fock_n", "u1"),
    ("qlp_milli", "<u2"),
    ("num_events", "<u4"),
    ("measurement_index", "<u4"),
    ("seed", "<u8"),
    ("features", "<f4", (FEATURE_DIM, FEATURE_DIM)),
])
MAX_RESAMPLE = 100


class Case(NamedTuple):
    fock_n: int
    qlp_milli: int
    num_events: int

    @property
    def qlp(self) -> float:
        return self.qlp_milli / 1000

    @property
    def label(self) -> PhotonClass:
        return label_for(self.fock_n, self.qlp)


def parameter_grid(
    fock_levels: Iterable[int] = FOCK_LEVELS,
    qlp_milli: Iterable[int] = QLP_GRID_MILLI,
    events: Iterable[int] = EVENTS_GRID,
) -> list[Case]:
    """Cases ordered Fock level first, then QLP, then event count."""
    return [Case(n, q, e) for n in fock_levels for q in qlp_milli for e in events]


def desk_grid(extended: bool = False) -> list[Case]:
    return parameter_grid(qlp_milli=DESK_QLP_MILLI, events=DESK_EXTENDED_EVENTS if extended else DESK_EVENTS)


def read_grid_file(path) -> list[Case]:
    """Whitespace-separated ``fock_n qlp num_events`` lines; ``#`` starts a comment."""
    cases = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            n, q, e = line.split()
            case = Case(int(n), int(round(float(q) * 1000)), int(e))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'fock_n qlp num_events', got {line!r}") from None
        SourceSpec(case.fock_n, case.qlp)
        if case.num_events <= 2 * TAU_MAX:
            raise ValueError(f"{path}:{lineno}: num_events must exceed {2 * TAU_MAX}")
        cases.append(case)
    return cases


def derive_seed(global_seed: int, case: Case, measurement_index: int, attempt: int = 0) -> int:
    """Stable 64-bit seed for one measurement of one case."""
    key = struct.pack(
        "<QBHIII",
        global_seed & 0xFFFF_FFFF_FFFF_FFFF,
        case.fock_n,
        case.qlp_milli,
        case.num_events,
        measurement_index,
        attempt,
    )
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def make_sample(case: Case, measurement_index: int, global_seed: int, tau_max: int = TAU_MAX):
    """Simulate and preprocess one measurement.

    Returns ``(features, seed, resampled)``; maps with zero normalization are
    regenerated with the next attempt's seed.
    """
    spec = SourceSpec(case.fock_n, case.qlp)
    for attempt in range(MAX_RESAMPLE):
        seed = derive_seed(global_seed, case, measurement_index, attempt)
        cmap = g3_map(simulate(spec, case.num_events, seed), tau_max)
        if cmap.valid:
            return preprocess(cmap).astype(np.float32), seed, attempt
    raise RuntimeError(f"{case}: no valid correlation map after {MAX_RESAMPLE} attempts")


def _case_rows(args) -> tuple[np.ndarray, int]:
    case, measurements, global_seed = args
    rows = np.zeros(measurements, dtype=SAMPLE_DTYPE)
    resampled = 0
    for m in range(measurements):
        features, seed, attempts = make_sample(case, m, global_seed)
        resampled += attempts
        rows[m] = (int(case.label), case.fock_n, case.qlp_milli, case.num_events, m, seed, features)
    return rows, resampled


class Dataset:
    """Samples held as a structured array with the on-disk record layout."""

    def __init__(self, records: np.ndarray):
        if records.dtype != SAMPLE_DTYPE:
            raise TypeError("records must use SAMPLE_DTYPE")
        self.records = records

    def __len__(self) -> int:
        return self.records.shape[0]

    def __getitem__(self, idx) -> "Dataset":
        return Dataset(np.atleast_1d(self.records[idx]))

    @property
    def features(self) -> np.ndarray:
        return self.records["features"]

    @property
    def labels(self) -> np.ndarray:
        return self.records["label"].astype(np.int64)

    @property
    def fock_n(self) -> np.ndarray:
        return self.records["fock_n"].astype(np.int64)

    @property
    def qlp_milli(self) -> np.ndarray:
        return self.records["qlp_milli"].astype(np.int64)

    @property
    def num_events(self) -> np.ndarray:
        return self.records["num_events"].astype(np.int64)

    @property
    def seeds(self) -> np.ndarray:
        return self.records["seed"]

    def cases(self) -> list[Case]:
        return [Case(int(n), int(q), int(e)) for n, q, e in zip(self.fock_n, self.qlp_milli, self.num_events)]

    def where(self, mask) -> "Dataset":
        return Dataset(self.records[np.asarray(mask, dtype=bool)])

    @classmethod
    def concatenate(cls, parts: Iterable["Dataset"]) -> "Dataset":
        return cls(np.concatenate([p.records for p in parts]))


def write_dataset(dataset: Dataset, path) -> str:
    """Write the binary dataset file and return its sha256 hex digest."""
    path = Path(path)
    header = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset), FEATURE_DIM)
    payload = dataset.records.tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"{path}: cannot write dataset ({exc.strerror})") from exc
    return hashlib.sha256(header + payload).hexdigest()


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: cannot read dataset ({exc.strerror})") from exc
    if len(data) < _DATASET_HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, version, count, dim = _DATASET_HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
    if version != DATASET_VERSION or dim != FEATURE_DIM:
        raise ValueError(f"{path}: unsupported dataset version {version} / matrix dim {dim}")
    if len(data) != _DATASET_HEADER.size + count * SAMPLE_DTYPE.itemsize:
        raise ValueError(f"{path}: payload size does not match {count} samples")
    records = np.frombuffer(data, dtype=SAMPLE_DTYPE, count=count, offset=_DATASET_HEADER.size).copy()
    return Dataset(records)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    global_seed: int
    measurements_per_case: int
    grid: str
    case_count: int
    sample_count: int
    resampled_invalid: int
    split_counts: dict[str, int]
    checksums: dict[str, str]

    def write(self, path) -> None:
        cp = configparser.ConfigParser()
        cp["dataset"] = {
            "global_seed": str(self.global_seed),
            "measurements_per_case": str(self.measurements_per_case),
            "grid": self.grid,
            "case_count": str(self.case_count),
            "sample_count": str(self.sample_count),
            "resampled_invalid": str(self.resampled_invalid),
        }
        cp["split"] = {k: str(v) for k, v in self.split_counts.items()}
        cp["checksums"] = dict(self.checksums)
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise OSError(f"{path}: cannot read manifest")
        ds = cp["dataset"]
        return cls(
            global_seed=ds.getint("global_seed"),
            measurements_per_case=ds.getint("measurements_per_case"),
            grid=ds.get("grid"),
            case_count=ds.getint("case_count"),
            sample_count=ds.getint("sample_count"),
            resampled_invalid=ds.getint("resampled_invalid"),
            split_counts={k: int(v) for k, v in cp["split"].items()} if cp.has_section("split") else {},
            checksums=dict(cp["checksums"]) if cp.has_section("checksums") else {},
        )


def build(grid: list[Case], measurements_per_case: int, global_seed: int, workers: int = 1) -> tuple[Dataset, int]:
    """Generate samples in memory; returns the dataset and the number of resampled maps."""
    if measurements_per_case < 1:
        raise ValueError("measurements_per_case must be at least 1")
    jobs = [(case, measurements_per_case, global_seed) for case in grid]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_case_rows, jobs, chunksize=16))
    else:
        results = [_case_rows(job) for job in jobs]
    resampled = sum(r for _, r in results)
    if resampled:
        log.info("resampled %d zero-normalization maps", resampled)
    records = np.concatenate([rows for rows, _ in results]) if results else np.zeros(0, SAMPLE_DTYPE)
    return Dataset(records), resampled


def generate(
    grid: list[Case],
    measurements_per_case: int,
    global_seed: int,
    out_dir,
    grid_name: str = "custom",
    workers: int = 1,
) -> DatasetManifest:
    """Write ``dataset.flds`` and ``manifest.ini`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, resampled = build(grid, measurements_per_case, global_seed, workers)
    checksum = write_dataset(dataset, out_dir / "dataset.flds")
    manifest = DatasetManifest(
        global_seed=global_seed,
        measurements_per_case=measurements_per_case,
        grid=grid_name,
        case_count=len(grid),
        sample_count=len(dataset),
        resampled_invalid=resampled,
        split_counts={},
        checksums={"dataset.flds": checksum},
    )
    manifest.write(out_dir / "manifest.ini")
    return manifest


SPLIT_NAMES = ("train", "val", "test")


def split(dataset: Dataset, fractions=(0.70, 0.20, 0.10), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified split by (label, case); each stratum is shuffled and cut by rounding."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be three non-negative values summing to 1")
    if len(dataset) < 10:
        raise ValueError("need at least 10 samples to split")
    rng = np.random.default_rng(seed)
    keys = np.stack([dataset.labels, dataset.fock_n, dataset.qlp_milli, dataset.num_events], axis=1)
    _, stratum = np.unique(keys, axis=0, return_inverse=True)
    stratum = stratum.reshape(-1)
    parts = ([], [], [])
    for s in range(stratum.max() + 1):
        idx = rng.permutation(np.flatnonzero(stratum == s))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = min(int(round(fractions[1] * len(idx))), len(idx) - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(Dataset(dataset.records[np.sort(np.concatenate(p))]) for p in parts)


def split_files(dataset_path, out_dir, fractions=(0.70, 0.20, 0.10), seed: int = 0) -> dict[str, int]:
    """Split a dataset file into ``train/val/test.flds`` and record them in ``manifest.ini``."""
    dataset_path = Path(dataset_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = split(read_dataset(dataset_path), fractions, seed)
    counts, checksums = {}, {}
    for name, part in zip(SPLIT_NAMES, parts):
        checksums[f"{name}.flds"] = write_dataset(part, out_dir / f"{name}.flds")
        counts[name] = len(part)
    manifest_path = dataset_path.parent / "manifest.ini"
    if manifest_path.exists():
        manifest = DatasetManifest.read(manifest_path)
    else:
        ds = read_dataset(dataset_path)
        manifest = DatasetManifest(0, 0, "unknown", len(set(ds.cases())), len(ds), 0, {}, {})
    manifest.split_counts = dict(counts, seed=seed)
    manifest.checksums.update(checksums)
    manifest.write(out_dir / "manifest.ini")
    return counts
