"""Accuracy surfaces for a classifier over a labelled test set, plus report export.

Groups with no samples are reported as NaN in arrays and ``NA`` in tables,
never as zero accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correlator import InvalidMapError, critical_points, g3_map
from .dataset import EVENTS_GRID, QLP_GRID_MILLI, Dataset
from .source import FOCK_LEVELS, SourceSpec, simulate
from .theory import PhotonClass, baseline_classify

CLASS_NAMES = tuple(c.short for c in PhotonClass)


@dataclass
class Metrics:
    overall_accuracy: float
    class_counts: np.ndarray  # (4,)
    per_class_accuracy: np.ndarray  # (4,)
    confusion_counts: np.ndarray  # (4, 4) rows = true class
    confusion: np.ndarray  # row-normalized
    qlp_milli: np.ndarray  # (21,)
    qlp_counts: np.ndarray
    accuracy_by_qlp: np.ndarray
    macro_by_qlp: np.ndarray
    events: np.ndarray  # (190,)
    events_counts: np.ndarray
    accuracy_by_events: np.ndarray
    macro_by_events: np.ndarray
    heatmap_counts: np.ndarray  # (3, 21, 190)
    heatmaps: np.ndarray


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(np.broadcast(num, den).shape, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _grouped(index, size, correct):
    counts = np.bincount(index, minlength=size)
    hits = np.bincount(index, weights=correct, minlength=size)
    return counts, _ratio(hits, counts)


def _macro(index, size, labels, correct):
    """Class-macro accuracy per group: mean over the classes present in that group."""
    per_class = np.full((4, size), np.nan)
    for c in range(4):
        sel = labels == c
        per_class[c] = _grouped(index[sel], size, correct[sel])[1]
    present = ~np.isnan(per_class)
    return _ratio(np.nansum(per_class, axis=0), present.sum(axis=0))


def _grid_index(values, grid, what):
    lookup = {int(v): i for i, v in enumerate(grid)}
    try:
        return np.array([lookup[int(v)] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"{what} value {exc.args[0]} is not on the parameter grid") from None


def compute_metrics(test_set: Dataset, predicted) -> Metrics:
    """Aggregate predicted class indices against the test set's labels and metadata."""
    predicted = np.asarray(predicted, dtype=np.int64)
    labels = test_set.labels
    if len(labels) == 0:
        raise ValueError("test set is empty")
    if predicted.shape != labels.shape:
        raise ValueError("one prediction per test sample is required")
    correct = (predicted == labels).astype(np.float64)

    class_counts, per_class = _grouped(labels, 4, correct)
    confusion_counts = np.zeros((4, 4), dtype=np.int64)
    np.add.at(confusion_counts, (labels, predicted), 1)
    confusion = _ratio(confusion_counts, confusion_counts.sum(axis=1, keepdims=True))

    qi = _grid_index(test_set.qlp_milli, QLP_GRID_MILLI, "qlp_milli")
    ei = _grid_index(test_set.num_events, EVENTS_GRID, "num_events")
    nq, ne = len(QLP_GRID_MILLI), len(EVENTS_GRID)
    qlp_counts, by_qlp = _grouped(qi, nq, correct)
    ev_counts, by_events = _grouped(ei, ne, correct)

    heat_counts = np.zeros((len(FOCK_LEVELS), nq, ne), dtype=np.int64)
    heat_hits = np.zeros((len(FOCK_LEVELS), nq, ne))
    fi = test_set.fock_n - 1
    np.add.at(heat_counts, (fi, qi, ei), 1)
    np.add.at(heat_hits, (fi, qi, ei), correct)

    return Metrics(
        overall_accuracy=float(correct.mean()),
        class_counts=class_counts,
        per_class_accuracy=per_class,
        confusion_counts=confusion_counts,
        confusion=confusion,
        qlp_milli=np.array(QLP_GRID_MILLI),
        qlp_counts=qlp_counts,
        accuracy_by_qlp=by_qlp,
        macro_by_qlp=_macro(qi, nq, labels, correct),
        events=np.array(EVENTS_GRID),
        events_counts=ev_counts,
        accuracy_by_events=by_events,
        macro_by_events=_macro(ei, ne, labels, correct),
        heatmap_counts=heat_counts,
        heatmaps=_ratio(heat_hits, heat_counts),
    )


def evaluate(params, test_set: Dataset, batch_size: int = 256) -> Metrics:
    from . import cnn

    scores = cnn.predict_batch(params, test_set.features, batch_size)
    return compute_metrics(test_set, scores.argmax(axis=1))


def baseline_predictions(test_set: Dataset, tau_max: int = 16) -> np.ndarray:
    """Baseline class per sample, recomputed from each sample's stored simulation seed.

    Stored features are rescaled, so the absolute critical points are
    recovered by re-running the (deterministic) simulation.
    """
    out = np.empty(len(test_set), dtype=np.int64)
    for i, (n, q, e, seed) in enumerate(zip(test_set.fock_n, test_set.qlp_milli, test_set.num_events, test_set.seeds)):
        record = simulate(SourceSpec(int(n), q / 1000), int(e), int(seed))
        try:
            g3, g2 = critical_points(g3_map(record, tau_max))
        except InvalidMapError:
            out[i] = PhotonClass.COHERENT
            continue
        out[i] = baseline_classify(g2, g3).photon_class
    return out


def first_crossing(events, accuracy, target: float) -> int | None:
    for e, acc in zip(events, accuracy):
        if not np.isnan(acc) and acc >= target:
            return int(e)
    return None


def threshold_events(metrics: Metrics, target: float = 0.90, macro: bool = False) -> int | None:
    """Smallest event count whose averaged accuracy reaches ``target``; None if never."""
    curve = metrics.macro_by_events if macro else metrics.accuracy_by_events
    return first_crossing(metrics.events, curve, target)


# -- report -----------------------------------------------------------------

def _fmt(x) -> str:
    return "NA" if np.isnan(x) else f"{x:.6f}"


def _write_tables(m: Metrics, out: Path) -> list[Path]:
    files = []

    def write(name, lines):
        path = out / name
        try:
            path.write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise OSError(f"{path}: cannot write report table ({exc.strerror})") from exc
        files.append(path)

    write("per_class.tsv", ["class\tsamples\taccuracy"] + [
        f"{name}\t{int(c)}\t{_fmt(a)}" for name, c, a in zip(CLASS_NAMES, m.class_counts, m.per_class_accuracy)
    ] + [f"overall\t{int(m.class_counts.sum())}\t{_fmt(m.overall_accuracy)}"])
    write("by_qlp.tsv", ["qlp\tsamples\taccuracy\tmacro_accuracy"] + [
        f"{q / 1000:.2f}\t{int(c)}\t{_fmt(a)}\t{_fmt(b)}"
        for q, c, a, b in zip(m.qlp_milli, m.qlp_counts, m.accuracy_by_qlp, m.macro_by_qlp)
    ])
    write("by_events.tsv", ["events\tsamples\taccuracy\tmacro_accuracy"] + [
        f"{e}\t{int(c)}\t{_fmt(a)}\t{_fmt(b)}"
        for e, c, a, b in zip(m.events, m.events_counts, m.accuracy_by_events, m.macro_by_events)
    ])
    write("confusion.tsv", ["true\\pred\t" + "\t".join(CLASS_NAMES)] + [
        name + "\t" + "\t".join(_fmt(v) for v in row) for name, row in zip(CLASS_NAMES, m.confusion)
    ])
    write("confusion_counts.tsv", ["true\\pred\t" + "\t".join(CLASS_NAMES)] + [
        name + "\t" + "\t".join(str(int(v)) for v in row) for name, row in zip(CLASS_NAMES, m.confusion_counts)
    ])
    for f, n in enumerate(FOCK_LEVELS):
        write(f"heatmap_fock{n}.tsv", ["qlp\\events\t" + "\t".join(str(e) for e in m.events)] + [
            f"{q / 1000:.2f}\t" + "\t".join(_fmt(v) for v in row) for q, row in zip(m.qlp_milli, m.heatmaps[f])
        ])
    return files


def _render(m: Metrics, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []

    def save(fig, name):
        path = out / name
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        files.append(path)

    fig, ax = plt.subplots(figsize=(4, 3))
    acc = np.nan_to_num(m.per_class_accuracy)
    ax.bar(CLASS_NAMES, acc, color=["tab:blue", "tab:red", "tab:red", "tab:red"])
    for i, a in enumerate(m.per_class_accuracy):
        ax.text(i, 0.02, "NA" if np.isnan(a) else f"{a:.3f}", ha="center", color="white")
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    save(fig, "per_class.png")

    for name, x, y, z, xlabel in (
        ("by_qlp.png", m.qlp_milli / 1000, m.accuracy_by_qlp, m.macro_by_qlp, "quantum light probability"),
        ("by_events.png", m.events, m.accuracy_by_events, m.macro_by_events, "detection events"),
    ):
        fig, ax = plt.subplots(figsize=(4, 3))
        keep = ~np.isnan(y)
        ax.plot(x[keep], y[keep], "o-", label="sample-weighted")
        ax.plot(x[keep], z[keep], "s--", label="class-macro")
        if name == "by_events.png":
            ax.set_xscale("log")
            cross = first_crossing(m.events, m.accuracy_by_events, 0.9)
            if cross is not None:
                ax.axvline(cross, color="green")
        ax.set_ylim(0, 1.02)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("accuracy")
        ax.legend(fontsize=7)
        fig.tight_layout()
        save(fig, name)

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.nan_to_num(m.confusion), cmap="YlGn", vmin=0, vmax=1)
    for i in range(4):
        for j in range(4):
            ax.text(j, i, _fmt(m.confusion[i, j])[:5], ha="center", va="center", fontsize=8)
    ax.set_xticks(range(4), CLASS_NAMES)
    ax.set_yticks(range(4), CLASS_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    save(fig, "confusion.png")

    for f, n in enumerate(FOCK_LEVELS):
        fig, ax = plt.subplots(figsize=(8, 3))
        cmap = plt.get_cmap("viridis").copy()
        cmap.set_bad("lightgray")
        im = ax.imshow(np.ma.masked_invalid(m.heatmaps[f]), cmap=cmap, vmin=0, vmax=1, aspect="auto", origin="lower",
                       interpolation="nearest")
        ticks = [i for i, e in enumerate(m.events) if e in (100, 1000, 10000, 100000)]
        ax.set_xticks(ticks, [str(m.events[i]) for i in ticks])
        ax.set_yticks(range(0, len(m.qlp_milli), 5), [f"{q / 1000:.2f}" for q in m.qlp_milli[::5]])
        ax.set_xlabel("detection events (grey: no samples)")
        ax.set_ylabel("QLP")
        ax.set_title(f"|{n}> grid")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        save(fig, f"heatmap_fock{n}.png")
    return files


def export_report(metrics: Metrics, out_dir, images: bool = True) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create report directory ({exc.strerror})") from exc
    files = _write_tables(metrics, out)
    if images:
        files += _render(metrics, out)
    return files
