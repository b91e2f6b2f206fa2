import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fockml.source import (
    DetectionRecord, SourceSpec, emit, read_record, sample_labels, simulate, split,
    write_record, write_record_text,
)
from oracles import central_moment, mixture_pmf


def test_spec_validation():
    spec = SourceSpec(2, 0.75)
    assert spec.mean_photons == 2.0
    assert spec.alpha == pytest.approx(np.sqrt(2))
    assert spec.qlp_milli == 750
    with pytest.raises(ValueError):
        SourceSpec(4, 0.5)
    with pytest.raises(ValueError):
        SourceSpec(1, 1.5)


def test_labels_degenerate(rng):
    assert sample_labels(1.0, 50, rng).all()
    assert not sample_labels(0.0, 50, rng).any()


def test_labels_fraction(rng):
    frac = sample_labels(0.5, 100_000, rng).mean()
    assert abs(frac - 0.5) <= 0.01


@pytest.mark.parametrize("qlp,n", [(-0.1, 10), (1.01, 10), (0.5, 0)])
def test_labels_errors(qlp, n, rng):
    with pytest.raises(ValueError):
        sample_labels(qlp, n, rng)


def test_emit_all_quantum(rng):
    out = emit(np.ones(100, bool), 2, rng)
    assert (out == 2).all()


def test_emit_all_coherent(rng):
    out = emit(np.zeros(100_000, bool), 2, rng)
    assert abs(out.mean() - 2) <= 0.02
    assert abs(out.var() - 2) <= 0.06


def test_emit_half(rng):
    labels = np.arange(100_000) % 2 == 0
    out = emit(labels, 2, rng)
    assert abs(out.mean() - 2) <= 0.02
    assert abs(out.var() - 1.0) <= 0.05


def test_emit_bad_level(rng):
    with pytest.raises(ValueError):
        emit(np.ones(3, bool), 5, rng)


def test_split_examples(rng):
    d1, d2, d3 = split(np.full(1000, 3), rng)
    assert ((d1 + d2 + d3) == 3).all()
    z = split(np.zeros(10, int), rng)
    assert all((d == 0).all() for d in z)
    d1, d2, d3 = split(np.full(100_000, 3), rng)
    for d in (d1, d2, d3):
        assert abs(d.mean() - 1.0) <= 0.01


def test_split_rejects_empty(rng):
    with pytest.raises(ValueError):
        split(np.array([], int), rng)


def test_simulate_single_photon():
    rec = simulate(SourceSpec(1, 1.0), 5000, 3)
    assert (rec.emitted == 1).all()


def test_simulate_conservation_total():
    rec = simulate(SourceSpec(2, 1.0), 100_000, 11)
    assert int(rec.emitted.sum()) == 200_000


def test_simulate_deterministic():
    a = simulate(SourceSpec(3, 0.4), 2000, 99)
    b = simulate(SourceSpec(3, 0.4), 2000, 99)
    assert a == b
    assert a != simulate(SourceSpec(3, 0.4), 2000, 100)


@settings(max_examples=60, deadline=None)
@given(
    n=st.sampled_from([1, 2, 3]),
    qlp=st.floats(0, 1),
    events=st.integers(1, 500),
    seed=st.integers(0, 2**63),
)
def test_conservation_property(n, qlp, events, seed):
    rng = np.random.default_rng(seed)
    stream = emit(sample_labels(qlp, events, rng), n, rng)
    d1, d2, d3 = split(stream, rng)
    assert np.array_equal(d1 + d2 + d3, stream)
    assert len(d1) == events


@settings(max_examples=30, deadline=None)
@given(n=st.sampled_from([1, 2]), events=st.integers(1, 2000), seed=st.integers(0, 2**32))
def test_exclusivity(n, events, seed):
    rec = simulate(SourceSpec(n, 1.0), events, seed)
    assert (rec.d1 * rec.d2 * rec.d3 == 0).all()
    assert rec.coincidences == 0


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("qlp", [0.0, 0.3, 0.65, 1.0])
def test_mixture_moments(n, qlp):
    size = 100_000
    rec = simulate(SourceSpec(n, qlp), size, 1000 * n + int(qlp * 100))
    x = rec.emitted.astype(float)
    pmf = mixture_pmf(n, qlp)
    var = central_moment(pmf, 2)
    mu4 = central_moment(pmf, 4)
    # reference variance from the exact pmf matches the closed form
    assert var == pytest.approx((1 - qlp) * n, abs=1e-9)
    assert abs(x.mean() - n) <= 3 * np.sqrt(var / size) + 1e-12
    assert abs(x.var() - var) <= 3 * np.sqrt(max(mu4 - var**2, 0) / size) + 1e-12


def test_record_validation():
    with pytest.raises(ValueError):
        DetectionRecord([1, 2], [1], [1, 1])
    with pytest.raises(ValueError):
        DetectionRecord([1, -1], [1, 1], [1, 1])
    rec = DetectionRecord([1, 2], [0, 1], [3, 3])
    with pytest.raises(ValueError):
        rec.d1[0] = 5


def test_record_roundtrip(tmp_path):
    rec = simulate(SourceSpec(3, 0.25), 777, 5)
    path = tmp_path / "r.fldr"
    write_record(rec, path)
    assert read_record(path) == rec
    data = path.read_bytes()
    assert data[:4] == b"FLDR"
    assert len(data) == 4 + 2 + 8 + 1 + 2 + 8 + 3 * 2 * 777


def test_record_corrupt(tmp_path):
    rec = simulate(SourceSpec(1, 0.5), 50, 1)
    path = tmp_path / "r.fldr"
    write_record(rec, path)
    data = path.read_bytes()
    (tmp_path / "short").write_bytes(data[:-1])
    (tmp_path / "magic").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "tiny").write_bytes(data[:5])
    for name in ("short", "magic", "tiny"):
        with pytest.raises(ValueError):
            read_record(tmp_path / name)


def test_record_text(tmp_path):
    rec = DetectionRecord([1, 0, 2], [0, 1, 1], [1, 1, 1], seed=4)
    path = tmp_path / "r.tsv"
    write_record_text(rec, path)
    table = np.loadtxt(path, dtype=int)
    assert table.tolist() == [[0, 1, 0, 1], [1, 0, 1, 1], [2, 2, 1, 1]]
    assert "coincidences=1" in path.read_text().splitlines()[0]
