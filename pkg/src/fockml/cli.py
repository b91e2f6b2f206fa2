"""Command-line entry point: ``fockml <subcommand> [flags]``.

Flag values resolve in the order command line > environment > config file >
built-in default.  Environment variables are named ``FOCKML_<FLAG>`` with
dashes turned into underscores (``FOCKML_TAU_MAX=8``).  A config file given
with ``--config`` is INI-style; keys in ``[fockml]`` apply to every
subcommand and keys in a section named after the subcommand (``[serve]``)
apply to that one only.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("fockml")

ENV_PREFIX = "FOCKML_"
_GRIDS = ("paper", "desk", "desk-extended")


def _common(p: argparse.ArgumentParser, out_default: str = "out") -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--config", help="INI config file with [fockml] and per-subcommand sections")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log errors")


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fockml",
        description="Simulate Fock/coherent photon sources, correlate g3 maps and classify them.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("simulate", help="simulate a detection record")
    _common(p)
    p.add_argument("--fock", type=int, choices=(1, 2, 3), required=True, help="Fock level n")
    p.add_argument("--qlp", type=_fraction, required=True, help="quantum light probability in [0, 1]")
    p.add_argument("--events", type=_positive, required=True, help="number of excitation pulses")

    p = sub.add_parser("correlate", help="compute the g3 map of a detection record")
    _common(p)
    p.add_argument("--record", help="detection record (default: OUT/record.fldr)")
    p.add_argument("--tau-max", type=int, default=16, help="largest delay in pulse periods (default: %(default)s)")
    p.add_argument("--no-images", action="store_true", help="skip the heatmap render")

    p = sub.add_parser("oracle", help="closed-form g2(0)/g3(0) values")
    _common(p)
    p.add_argument("--table1", action="store_true", help="print the 5x3 table of g2(0) and g3(0)")
    p.add_argument("--n", type=int, help="Fock level for a single evaluation")
    p.add_argument("--k", type=int, choices=(2, 3), help="correlation order for a single evaluation")
    p.add_argument("--p", type=_fraction, help="Fock weight for a single evaluation")

    p = sub.add_parser("dataset-gen", help="generate a labelled feature dataset")
    _common(p)
    p.add_argument("--grid", default="desk", help=f"one of {', '.join(_GRIDS)} or a case file (default: %(default)s)")
    p.add_argument("--measurements", type=_positive, default=100, help="measurements per case (default: %(default)s)")
    p.add_argument("--workers", type=_positive, default=1, help="parallel worker processes (default: %(default)s)")

    p = sub.add_parser("dataset-split", help="stratified train/val/test split")
    _common(p)
    p.add_argument("--dataset", help="dataset file (default: OUT/dataset.flds)")
    p.add_argument("--fractions", default="0.70,0.20,0.10", help="train,val,test fractions (default: %(default)s)")

    p = sub.add_parser("train", help="train the convolutional classifier")
    _common(p)
    p.add_argument("--train", help="training set (default: OUT/train.flds)")
    p.add_argument("--val", help="validation set (default: OUT/val.flds when present)")
    p.add_argument("--epochs", type=_positive, default=1, help="passes over the training set (default: %(default)s)")
    p.add_argument("--batch-size", type=_positive, default=32, help="mini-batch size (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default: %(default)s)")
    p.add_argument("--hidden", type=_positive, default=512, help="hidden dense width (default: %(default)s)")

    p = sub.add_parser("eval", help="evaluate a classifier on a test set and write a report")
    _common(p)
    p.add_argument("--test", help="test set (default: OUT/test.flds)")
    p.add_argument("--weights", help="model weights (default: OUT/weights.flnn)")
    p.add_argument("--baseline", action="store_true", help="evaluate the threshold baseline instead of the CNN")
    p.add_argument("--hidden", type=_positive, default=512, help="hidden dense width of the weights (default: %(default)s)")
    p.add_argument("--no-images", action="store_true", help="write tables only")

    p = sub.add_parser("classify", help="classify critical points, a map or a record")
    _common(p)
    p.add_argument("--baseline", action="store_true", help="use the threshold baseline")
    p.add_argument("--g2", type=float, help="g2(0) estimate (baseline only)")
    p.add_argument("--g3", type=float, help="g3(0) estimate (baseline only)")
    p.add_argument("--map", help="correlation map file (.flg3 or .tsv)")
    p.add_argument("--record", help="detection record file (.fldr)")
    p.add_argument("--weights", help="model weights for CNN classification")
    p.add_argument("--tau-max", type=int, default=16, help="largest delay when correlating a record (default: %(default)s)")
    p.add_argument("--hidden", type=_positive, default=512, help="hidden dense width of the weights (default: %(default)s)")

    p = sub.add_parser("serve", help="classify a streamed count record (TCP or stdin)")
    _common(p)
    p.add_argument("--listen", help="host:port to listen on; stdin/stdout when omitted")
    p.add_argument("--window", type=_positive, default=10_000, help="sliding window in pulses (default: %(default)s)")
    p.add_argument("--emit-every", type=_positive, default=1_000, help="verdict cadence in pulses (default: %(default)s)")
    p.add_argument("--tau-max", type=int, default=16, help="largest delay in pulse periods (default: %(default)s)")
    p.add_argument("--gap-cap", type=int, help="max zero bins inserted for a bin-index gap (default: window)")
    p.add_argument("--weights", help="model weights; the baseline is used when omitted")
    p.add_argument("--baseline", action="store_true", help="force the threshold baseline")
    p.add_argument("--hidden", type=_positive, default=512, help="hidden dense width of the weights (default: %(default)s)")
    return parser


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(action, argparse._CountAction):
        return int(raw)
    return action.type(raw) if action.type else raw


def _external_defaults(subparser: argparse.ArgumentParser, command: str, config_path: str | None) -> dict:
    values: dict[str, str] = {}
    if config_path:
        cp = configparser.ConfigParser()
        if not cp.read(config_path):
            subparser.error(f"cannot read config file {config_path}")
        for section in ("fockml", command):
            if cp.has_section(section):
                values.update({k.replace("-", "_"): v for k, v in cp[section].items()})
    for action in subparser._actions:
        env = ENV_PREFIX + action.dest.upper()
        if env in os.environ:
            values[action.dest] = os.environ[env]
    defaults = {}
    for action in subparser._actions:
        if action.dest in values and action.dest not in ("help", "config"):
            try:
                defaults[action.dest] = _convert(action, values[action.dest])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                subparser.error(f"bad value for {action.dest}: {exc}")
            # externally supplied values satisfy required flags
            action.required = False
    return defaults


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if command in subparsers:
        sp = subparsers[command]
        config_path = known.config or os.environ.get(ENV_PREFIX + "CONFIG")
        sp.set_defaults(**_external_defaults(sp, command, config_path))
    args = parser.parse_args(argv)
    args._parser = subparsers[args.command]
    return args


def _require_file(args, path) -> Path:
    path = Path(path)
    if not path.is_file():
        args._parser.error(f"input file not found: {path}")
    return path


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args) -> None:
    from .source import SourceSpec, simulate, write_record, write_record_text

    spec = SourceSpec(args.fock, args.qlp)
    record = simulate(spec, args.events, args.seed)
    out = _out(args)
    write_record(record, out / "record.fldr")
    write_record_text(record, out / "record.tsv")
    print(
        f"events={len(record)} photons={int(record.emitted.sum())} "
        f"coincidences={record.coincidences} -> {out / 'record.fldr'}"
    )


def _render_map(cmap, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .correlator import cross_sections

    taus = cmap.tau_axis
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(9, 4))
    extent = (taus[0] - 0.5, taus[-1] + 0.5, taus[0] - 0.5, taus[-1] + 0.5)
    im = ax.imshow(cmap.values, origin="lower", extent=extent, cmap="viridis")
    ax.set_xlabel("tau12")
    ax.set_ylabel("tau13")
    fig.colorbar(im, ax=ax)
    cs = cross_sections(cmap)
    width = 0.28
    bx.bar(taus - width, cs.diagonal, width, color="black", label="tau13 = -tau12")
    bx.bar(taus, cs.zero, width, color="magenta", label="tau13 = 0")
    bx.bar(taus + width, cs.equal, width, color="gold", label="tau13 = tau12")
    bx.set_xlabel("tau12")
    bx.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_correlate(args) -> None:
    from .correlator import critical_points, cross_sections, g3_map, write_map, write_map_text
    from .source import read_record

    path = _require_file(args, args.record or Path(args.out) / "record.fldr")
    out = _out(args)
    record = read_record(path)
    cmap = g3_map(record, args.tau_max)
    write_map(cmap, out / "map.flg3")
    write_map_text(cmap, out / "map.tsv")
    if not cmap.valid:
        print("map invalid: a detector recorded no photons")
        return
    cs = cross_sections(cmap)
    table = np.column_stack([cmap.tau_axis, cs.diagonal, cs.zero, cs.equal])
    np.savetxt(out / "cross_sections.tsv", table, fmt=["%d", "%.6f", "%.6f", "%.6f"], delimiter="\t",
               header="tau12\ttau13=-tau12\ttau13=0\ttau13=tau12", comments="")
    if not args.no_images:
        _render_map(cmap, out / "map.png")
    pts = critical_points(cmap)
    print(f"g3_zero={pts.g3_zero:.6f} g2_zero_est={pts.g2_zero_est:.6f} -> {out / 'map.tsv'}")


def cmd_oracle(args) -> None:
    from .theory import format_table1, gk_zero

    single = (args.n, args.k, args.p)
    if any(v is not None for v in single):
        if any(v is None for v in single):
            args._parser.error("--n, --k and --p must be given together")
        print(f"g{args.k}(0) = {gk_zero(args.n, args.k, args.p):.6f}")
    if args.table1 or all(v is None for v in single):
        print(format_table1())


def cmd_dataset_gen(args) -> None:
    from . import dataset

    if args.grid == "paper":
        grid = dataset.parameter_grid()
    elif args.grid in ("desk", "desk-extended"):
        grid = dataset.desk_grid(extended=args.grid == "desk-extended")
    else:
        grid = dataset.read_grid_file(_require_file(args, args.grid))
    out = _out(args)
    manifest = dataset.generate(grid, args.measurements, args.seed, out, grid_name=args.grid, workers=args.workers)
    print(
        f"cases={manifest.case_count} samples={manifest.sample_count} "
        f"resampled={manifest.resampled_invalid} -> {out / 'dataset.flds'}"
    )


def cmd_dataset_split(args) -> None:
    from . import dataset

    try:
        fractions = tuple(float(x) for x in args.fractions.split(","))
    except ValueError:
        args._parser.error(f"--fractions must be three comma-separated numbers, got {args.fractions!r}")
    path = _require_file(args, args.dataset or Path(args.out) / "dataset.flds")
    out = _out(args)
    counts = dataset.split_files(path, out, fractions, args.seed)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(args) -> None:
    from . import cnn
    from .dataset import read_dataset

    base = Path(args.out)
    train_path = _require_file(args, args.train or base / "train.flds")
    val_path = args.val or (base / "val.flds" if (base / "val.flds").exists() else None)
    val_path = _require_file(args, val_path) if val_path else None
    out = _out(args)
    train_set = read_dataset(train_path)
    val_set = read_dataset(val_path) if val_path else None
    hyper = cnn.TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr)
    params, history = cnn.train(train_set, val_set, hyper, args.seed, cnn.ModelConfig(hidden=args.hidden))
    cnn.save(params, out / "weights.flnn")
    history.write_tsv(out / "history.tsv")
    val = list(history.val_accuracy.values())
    print(f"steps={len(history.steps)} final_loss={history.losses[-1]:.4f}"
          + (f" val_accuracy={val[-1]:.4f}" if val else "") + f" -> {out / 'weights.flnn'}")


def _load_params(args, path):
    from . import cnn

    return cnn.load(_require_file(args, path), cnn.ModelConfig(hidden=args.hidden))


def cmd_eval(args) -> None:
    from . import evaluation
    from .dataset import read_dataset

    base = Path(args.out)
    test_path = _require_file(args, args.test or base / "test.flds")
    weights_path = None if args.baseline else _require_file(args, args.weights or base / "weights.flnn")
    out = _out(args)
    test_set = read_dataset(test_path)
    if weights_path is None:
        metrics = evaluation.compute_metrics(test_set, evaluation.baseline_predictions(test_set))
    else:
        metrics = evaluation.evaluate(_load_params(args, weights_path), test_set)
    report = out / "report"
    evaluation.export_report(metrics, report, images=not args.no_images)
    per_class = " ".join(
        f"{name}={'NA' if np.isnan(a) else f'{a:.4f}'}"
        for name, a in zip(evaluation.CLASS_NAMES, metrics.per_class_accuracy)
    )
    threshold = evaluation.threshold_events(metrics)
    print(f"accuracy={metrics.overall_accuracy:.4f} {per_class} events@90%={threshold or 'NA'} -> {report}")


def cmd_classify(args) -> None:
    from .correlator import critical_points, g3_map, read_map, read_map_text
    from .source import read_record
    from .theory import baseline_classify

    if args.g2 is not None or args.g3 is not None:
        if args.g2 is None or args.g3 is None:
            args._parser.error("--g2 and --g3 must be given together")
        verdict = baseline_classify(args.g2, args.g3)
        print(f"{verdict.photon_class.short} qlp={verdict.qlp_est:.3f}")
        return
    if args.map:
        path = _require_file(args, args.map)
        cmap = read_map_text(path) if path.suffix == ".tsv" else read_map(path)
    elif args.record:
        cmap = g3_map(read_record(_require_file(args, args.record)), args.tau_max)
    else:
        args._parser.error("give --g2/--g3, --map or --record")
    pts = critical_points(cmap)
    if args.baseline or not args.weights:
        verdict = baseline_classify(pts.g2_zero_est, pts.g3_zero)
        print(f"{verdict.photon_class.short} qlp={verdict.qlp_est:.3f} "
              f"g3_zero={pts.g3_zero:.6f} g2_zero_est={pts.g2_zero_est:.6f}")
        return
    from .cnn import predict

    cls, scores = predict(_load_params(args, args.weights), cmap)
    print(f"{cls.short} scores=" + ",".join(f"{s:.6f}" for s in scores))


def cmd_serve(args) -> None:
    from . import stream

    config = stream.StreamConfig(args.window, args.emit_every, args.tau_max, args.gap_cap)
    if args.weights and not args.baseline:
        classifier = stream.CnnClassifier(_load_params(args, args.weights))
    else:
        classifier = stream.BaselineClassifier()
    stream.serve(config, classifier, args.listen)


COMMANDS = {
    "simulate": cmd_simulate,
    "correlate": cmd_correlate,
    "oracle": cmd_oracle,
    "dataset-gen": cmd_dataset_gen,
    "dataset-split": cmd_dataset_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(level)
    resolved = {k: v for k, v in vars(args).items() if not k.startswith("_")}
    log.info("resolved configuration: %s", resolved)
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"fockml {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
