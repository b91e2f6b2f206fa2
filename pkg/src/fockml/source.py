"""Monte-Carlo emission of pulsed Fock/coherent mixtures and the three-detector split.

A source is a mixture: each excitation pulse is independently a Fock-state
emission (exactly ``fock_n`` photons) with probability ``qlp``, otherwise a
coherent emission with a Poisson(``fock_n``) photon number.  Every pulse's
photons are then distributed over three photon-number-resolving detectors by
a balanced multinomial split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FOCK_LEVELS = (1, 2, 3)
SPLIT_PROBS = (1 / 3, 1 / 3, 1 / 3)

RECORD_MAGIC = b"FLDR"
RECORD_VERSION = 1
_RECORD_HEADER = struct.Struct("<4sHQBHQ")


@dataclass(frozen=True)
class SourceSpec:
    fock_n: int
    qlp: float

    def __post_init__(self):
        if self.fock_n not in FOCK_LEVELS:
            raise ValueError(f"fock_n must be one of {FOCK_LEVELS}, got {self.fock_n}")
        if not 0.0 <= self.qlp <= 1.0:
            raise ValueError(f"qlp must lie in [0, 1], got {self.qlp}")

    @property
    def mean_photons(self) -> float:
        # coherent admixture shares the Fock level's mean photon number
        return float(self.fock_n)

    @property
    def alpha(self) -> float:
        return float(np.sqrt(self.mean_photons))

    @property
    def qlp_milli(self) -> int:
        return int(round(self.qlp * 1000))


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """Per-pulse photon counts at the three virtual detectors.

    ``fock_n`` and ``qlp_milli`` are provenance metadata only; records built
    from external data carry zeros there.
    """

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    seed: int = 0
    fock_n: int = 0
    qlp_milli: int = 0

    def __post_init__(self):
        arrays = [np.array(d, dtype=np.int64) for d in (self.d1, self.d2, self.d3)]
        if any(a.ndim != 1 for a in arrays):
            raise ValueError("detector streams must be one-dimensional")
        if not arrays[0].shape == arrays[1].shape == arrays[2].shape:
            raise ValueError("detector streams must have identical length")
        if any((a < 0).any() for a in arrays):
            raise ValueError("photon counts must be non-negative")
        for name, a in zip(("d1", "d2", "d3"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.d1.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DetectionRecord):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.fock_n == other.fock_n
            and self.qlp_milli == other.qlp_milli
            and all(np.array_equal(a, b) for a, b in zip(self.streams, other.streams))
        )

    @property
    def streams(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.d1, self.d2, self.d3

    @property
    def emitted(self) -> np.ndarray:
        return self.d1 + self.d2 + self.d3

    @property
    def coincidences(self) -> int:
        """Pulses with at least one photon on every detector (triple co-detections)."""
        return int(np.count_nonzero((self.d1 > 0) & (self.d2 > 0) & (self.d3 > 0)))

    def window(self, start: int, stop: int) -> "DetectionRecord":
        return DetectionRecord(
            self.d1[start:stop], self.d2[start:stop], self.d3[start:stop],
            seed=self.seed, fock_n=self.fock_n, qlp_milli=self.qlp_milli,
        )


def _check_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_labels(qlp: float, num_events: int, rng) -> np.ndarray:
    """Draw one Bernoulli(qlp) label per pulse; True marks a Fock-state emission."""
    if not 0.0 <= qlp <= 1.0:
        raise ValueError(f"qlp must lie in [0, 1], got {qlp}")
    if num_events < 1:
        raise ValueError("num_events must be at least 1")
    rng = _check_rng(rng)
    return rng.random(int(num_events)) < qlp


def emit(labels: np.ndarray, fock_n: int, rng) -> np.ndarray:
    """Replace labels with photon numbers.

    Fock-labelled pulses carry exactly ``fock_n`` photons, the others an
    independent Poisson draw with the same mean.
    """
    if fock_n not in FOCK_LEVELS:
        raise ValueError(f"fock_n must be one of {FOCK_LEVELS}, got {fock_n}")
    labels = np.asarray(labels, dtype=bool)
    rng = _check_rng(rng)
    # one draw per pulse regardless of label keeps RNG consumption label-independent
    coherent = rng.poisson(float(fock_n), size=labels.shape[0])
    return np.where(labels, fock_n, coherent).astype(np.int64)


def split(stream: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    stream = np.asarray(stream, dtype=np.int64)
    if stream.ndim != 1 or stream.shape[0] == 0:
        raise ValueError("emission stream must be a non-empty vector")
    if (stream < 0).any():
        raise ValueError("photon counts must be non-negative")
    rng = _check_rng(rng)
    counts = rng.multinomial(stream, SPLIT_PROBS)
    return counts[:, 0], counts[:, 1], counts[:, 2]


def simulate(spec: SourceSpec, num_events: int, seed: int) -> DetectionRecord:
    """Run labels -> emission -> split with a single generator seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    labels = sample_labels(spec.qlp, num_events, rng)
    stream = emit(labels, spec.fock_n, rng)
    d1, d2, d3 = split(stream, rng)
    return DetectionRecord(d1, d2, d3, seed=int(seed), fock_n=spec.fock_n, qlp_milli=spec.qlp_milli)


# -- persistence ------------------------------------------------------------

def write_record(record: DetectionRecord, path) -> None:
    path = Path(path)
    if max(int(d.max(initial=0)) for d in record.streams) > 0xFFFF:
        raise ValueError("photon counts exceed the u16 range of the record format")
    header = _RECORD_HEADER.pack(
        RECORD_MAGIC, RECORD_VERSION, len(record), record.fock_n, record.qlp_milli, record.seed
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for d in record.streams:
            fh.write(d.astype("<u2").tobytes())


def read_record(path) -> DetectionRecord:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _RECORD_HEADER.size:
        raise ValueError(f"{path}: truncated detection record header")
    magic, version, num_events, fock_n, qlp_milli, seed = _RECORD_HEADER.unpack_from(data)
    if magic != RECORD_MAGIC:
        raise ValueError(f"{path}: not a detection record (magic {magic!r})")
    if version != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {version}")
    expected = _RECORD_HEADER.size + 3 * 2 * num_events
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<u2", offset=_RECORD_HEADER.size).reshape(3, num_events)
    return DetectionRecord(arr[0], arr[1], arr[2], seed=seed, fock_n=fock_n, qlp_milli=qlp_milli)


def write_record_text(record: DetectionRecord, path) -> None:
    """Column export for debugging: pulse_index, d1, d2, d3."""
    table = np.column_stack([np.arange(len(record)), *record.streams])
    header = (
        f"fock_n={record.fock_n} qlp_milli={record.qlp_milli} seed={record.seed} "
        f"events={len(record)} coincidences={record.coincidences}\n"
        "pulse_index\td1\td2\td3"
    )
    np.savetxt(path, table, fmt="%d", delimiter="\t", header=header)
