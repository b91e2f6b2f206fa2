import hashlib
import subprocess
import sys

import numpy as np
import pytest

from fockml import cli
from fockml.correlator import read_map
from fockml.source import read_record

SUBCOMMANDS = ("simulate", "correlate", "oracle", "dataset-gen", "dataset-split", "train", "eval", "classify", "serve")


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_documents_flags(command, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    sub = cli.build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
        if action.help:
            assert action.help.split("(")[0].strip()[:20] in " ".join(text.split())


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fockml", "oracle", "--table1", "-q"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[-1].split("\t") == ["1.00", "0.00", "0.00", "0.50", "0.00", "0.67", "0.22"]


def test_simulate_correlate(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(["simulate", "--fock", "2", "--qlp", "1.0", "--events", "100000", "--seed", "7",
                         "--out", str(out)], capsys)
    assert code == 0 and "photons=200000" in text
    rec = read_record(out / "record.fldr")
    assert len(rec) == 100_000 and rec.seed == 7
    code, text, _ = run(["correlate", "--out", str(out)], capsys)
    assert code == 0
    grid = np.loadtxt(out / "map.tsv", delimiter="\t", skiprows=1)
    assert grid.shape == (33, 34)
    assert grid[16, 17] < 0.02
    assert read_map(out / "map.flg3").at(0, 0) == 0.0
    for name in ("cross_sections.tsv", "map.png"):
        assert (out / name).exists()


def test_outputs_deterministic(tmp_path, capsys):
    digests = []
    for d in ("a", "b"):
        out = tmp_path / d
        run(["simulate", "--fock", "3", "--qlp", "0.6", "--events", "3000", "--seed", "1", "--out", str(out)], capsys)
        run(["correlate", "--out", str(out)], capsys)
        digests.append({p.name: sha(p) for p in sorted(out.iterdir())})
    assert digests[0] == digests[1]
    assert set(digests[0]) == {"record.fldr", "record.tsv", "map.flg3", "map.tsv", "cross_sections.tsv", "map.png"}


def test_oracle(capsys):
    code, text, _ = run(["oracle", "--table1"], capsys)
    rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
    assert code == 0 and len(rows) == 5 and all(len(r) == 7 for r in rows)
    assert rows[2] == ["0.50", "0.50", "0.50", "0.75", "0.50", "0.83", "0.61"]
    code, text, _ = run(["oracle", "--n", "3", "--k", "3", "--p", "0.5"], capsys)
    assert text.strip() == "g3(0) = 0.611111"


def test_oracle_partial_query(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["oracle", "--n", "3"])
    assert info.value.code == 2


def test_classify_baseline(capsys):
    code, text, _ = run(["classify", "--baseline", "--g2", "0.50", "--g3", "0.00"], capsys)
    assert code == 0 and text.strip() == "F2 qlp=1.000"
    code, text, _ = run(["classify", "--g2", "1", "--g3", "1"], capsys)
    assert text.strip() == "COH qlp=0.000"


def test_classify_record_and_map(tmp_path, capsys):
    out = tmp_path
    run(["simulate", "--fock", "1", "--qlp", "1", "--events", "20000", "--out", str(out)], capsys)
    code, text, _ = run(["classify", "--record", str(out / "record.fldr")], capsys)
    assert code == 0 and text.startswith("F1 ")
    run(["correlate", "--out", str(out), "--no-images"], capsys)
    assert not (out / "map.png").exists()
    _, via_bin, _ = run(["classify", "--map", str(out / "map.flg3")], capsys)
    assert via_bin == text


def test_pipeline(tmp_path, capsys):
    out = tmp_path / "p"
    grid = tmp_path / "grid.txt"
    grid.write_text("1 1.0 2000\n2 1.0 2000\n3 1.0 2000\n2 0.0 2000\n")
    assert run(["dataset-gen", "--grid", str(grid), "--measurements", "5", "--seed", "3", "--out", str(out)], capsys)[0] == 0
    code, text, _ = run(["dataset-split", "--out", str(out)], capsys)
    assert code == 0 and text.strip() == "train=16 val=4 test=0"
    code, text, _ = run(["dataset-split", "--out", str(out), "--fractions", "0.6,0.2,0.2"], capsys)
    assert text.strip() == "train=12 val=4 test=4"
    code, text, _ = run(["train", "--out", str(out), "--hidden", "16", "--batch-size", "4"], capsys)
    assert code == 0 and "steps=3" in text and (out / "history.tsv").exists()
    code, text, _ = run(["eval", "--out", str(out), "--hidden", "16", "--no-images"], capsys)
    assert code == 0 and text.startswith("accuracy=")
    assert (out / "report" / "confusion.tsv").exists()
    code, text, _ = run(["eval", "--out", str(out), "--baseline", "--no-images"], capsys)
    assert text.startswith("accuracy=1.0000")
    # weights with a different hidden width are refused as a runtime error
    code, _, err = run(["eval", "--out", str(out), "--no-images"], capsys)
    assert code == 1 and "different model configuration" in err


def test_usage_errors(tmp_path, capsys):
    for argv in (
        ["simulate", "--fock", "4", "--qlp", "1", "--events", "10"],
        ["simulate", "--fock", "1", "--qlp", "1.5", "--events", "10"],
        ["simulate", "--fock", "1", "--qlp", "1"],
        ["correlate", "--record", str(tmp_path / "missing.fldr")],
        ["train", "--out", str(tmp_path)],
        ["classify", "--g2", "0.5"],
        ["nonsense"],
        ["oracle", "--bogus"],
    ):
        with pytest.raises(SystemExit) as info:
            cli.main(argv)
        assert info.value.code == 2, argv


def test_runtime_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.fldr"
    bad.write_bytes(b"garbage")
    code, _, err = run(["correlate", "--record", str(bad), "--out", str(tmp_path)], capsys)
    assert code == 1 and "truncated" in err
    run(["simulate", "--fock", "1", "--qlp", "1", "--events", "20", "--out", str(tmp_path)], capsys)
    code, _, err = run(["correlate", "--out", str(tmp_path)], capsys)
    assert code == 1 and "too short" in err


def test_env_and_config(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[fockml]\nseed = 5\n\n[simulate]\nfock = 3\nqlp = 0.25\nevents = 300\n")
    out = tmp_path / "o"
    args = cli.parse_args(["simulate", "--config", str(cfg), "--out", str(out)])
    assert (args.seed, args.fock, args.qlp, args.events) == (5, 3, 0.25, 300)
    monkeypatch.setenv("FOCKML_EVENTS", "400")
    monkeypatch.setenv("FOCKML_SEED", "6")
    args = cli.parse_args(["simulate", "--config", str(cfg), "--seed", "9"])
    assert (args.seed, args.events) == (9, 400)
    monkeypatch.setenv("FOCKML_CONFIG", str(cfg))
    assert cli.parse_args(["simulate"]).fock == 3
    monkeypatch.setenv("FOCKML_TAU_MAX", "8")
    assert cli.parse_args(["serve"]).tau_max == 8
    monkeypatch.setenv("FOCKML_TAU_MAX", "eight")
    with pytest.raises(SystemExit):
        cli.parse_args(["serve"])


def test_resolved_config_logged(tmp_path, capsys, caplog):
    caplog.set_level("INFO", logger="fockml")
    run(["oracle", "--table1", "--out", str(tmp_path)], capsys)
    text = caplog.text
    assert "resolved configuration" in text and "'table1': True" in text and "'seed': 0" in text


def test_serve_stdin(tmp_path):
    lines = [f"EVT {i} 1 1 1" for i in range(60)] + ["nope", "FLUSH"]
    proc = subprocess.run(
        [sys.executable, "-m", "fockml", "serve", "--window", "50", "--emit-every", "20", "-q"],
        input="\n".join(lines) + "\n", capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0
    out = proc.stdout.splitlines()
    assert [line.split()[1:4] for line in out if line.startswith("CLS")] == [
        ["0", "39", "COH"], ["10", "59", "COH"], ["10", "59", "COH"],
    ]
    assert "ERR unknown-command" in out
