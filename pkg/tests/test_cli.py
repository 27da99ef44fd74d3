import csv
import json

import pytest

from langadapt.cli import main, sha256_file
from langadapt.corpus import load_corpus

SPEC = """\
defaults:
  feature_dim: 6
  n_speakers: 10
  utterances_per_speaker: 3
  segments_per_utterance: 2
  negative_mean: {0-2: -1.0}
  positive_mean: {0-2: 1.0}
corpora:
  - corpus_id: EMO-DB
  - corpus_id: SAVEE
    shift_offset: {3-5: 2.0}
  - corpus_id: EMOVO
    shift_offset: {2-4: -1.5}
  - corpus_id: URDU
    shift_scale: 1.5
"""

EXP = """\
hidden_dim: 8
latent_dim: 8
autoencoder: {epochs: 2, batch_size: 16}
adapt: {epochs: 3, batch_size: 16, warmup_steps: 2, probe_size: 8, discriminator_hidden: [8, 4]}
"""


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.yaml").write_text(SPEC)
    (root / "exp.yaml").write_text(EXP)
    assert main(["generate", "--config", str(root / "spec.yaml"), "--seed", "3", "--out", str(root / "data")]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_writes_declared_counts(data):
    files = sorted(p.name for p in (data / "data").glob("*.csv"))
    assert files == ["EMO-DB.csv", "EMOVO.csv", "SAVEE.csv", "URDU.csv"]
    for name in files:
        assert len(_rows(data / "data" / name)) == 10 * 3 * 2
        c = load_corpus(data / "data" / name)
        assert len(c.speakers()) == 10 and len(c) == 30


def test_generate_is_byte_identical(data, tmp_path):
    assert main(["generate", "--config", str(data / "spec.yaml"), "--seed", "3", "--out", str(tmp_path)]) == 0
    for p in (data / "data").glob("*"):
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_generate_reports_spec_line(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text(SPEC.replace("shift_scale: 1.5", "shift_scael: 1.5"))
    assert main(["generate", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path)]) == 2
    assert "bad.yaml:15" in capsys.readouterr().err


def _run(data, *argv):
    return main(list(argv) + ["--config", str(data / "exp.yaml")])


def test_baseline_folds(data, tmp_path):
    out = tmp_path / "b"
    assert _run(data, "baseline", "--source", str(data / "data" / "URDU.csv"),
                "--folds", "3", "--test-speakers", "2", "--out", str(out)) == 0
    rows = _rows(out / "report.csv")
    assert [r["fold"] for r in rows] == ["0", "1", "2", "pooled"]
    assert {r["condition"] for r in rows} == {"raw"}
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["folds"] == 3 and m["config"]["test_speakers"] == 2


def test_multi_emits_one_row_per_held_out_corpus(data, tmp_path):
    out = tmp_path / "m"
    sources = [str(p) for p in sorted((data / "data").glob("*.csv"))]
    assert _run(data, "multi", "--source", *sources, "--condition", "latent", "--out", str(out)) == 0
    rows = _rows(out / "comparison.csv")
    assert len(rows) == 4
    assert sorted(r["target"] for r in rows) == ["EMO-DB", "EMOVO", "SAVEE", "URDU"]
    assert all(r["raw"] == "" and r["latent"] for r in rows)
    assert len(list(out.glob("adapt_*.csv"))) == 4


def test_cross_replays_byte_identically_and_leaves_inputs(data, tmp_path):
    src, tgt = data / "data" / "EMO-DB.csv", data / "data" / "SAVEE.csv"
    before = sha256_file(src), sha256_file(tgt)
    out = tmp_path / "c"
    assert _run(data, "cross", "--source", str(src), "--target", str(tgt), "--seed", "4", "--out", str(out)) == 0
    assert (sha256_file(src), sha256_file(tgt)) == before
    rows = _rows(out / "report.csv")
    assert [r["condition"] for r in rows if r["fold"] == "pooled"] == ["raw", "latent", "fused"]
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 4 and m["inputs"]["target"]["sha256"] == before[1]
    assert m["outputs"]["report.csv"] == sha256_file(out / "report.csv")

    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    for name in ("report.csv", "comparison.csv", "report.txt", "manifest.json"):
        assert (tmp_path / "r" / name).read_bytes() == (out / name).read_bytes()


def test_replay_refuses_changed_input(data, tmp_path, capsys):
    src = tmp_path / "src.csv"
    src.write_bytes((data / "data" / "EMO-DB.csv").read_bytes())
    out = tmp_path / "c"
    assert _run(data, "cross", "--source", str(src), "--target", str(data / "data" / "URDU.csv"),
                "--condition", "raw", "--out", str(out)) == 0
    src.write_bytes(src.read_bytes().replace(b"\n", b"\n\n", 1))
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "r")]) == 2
    assert "changed" in capsys.readouterr().err


def test_adapt_trace_rows(data, tmp_path):
    base = ["adapt-trace", "--source", str(data / "data" / "EMO-DB.csv"), "--target", str(data / "data" / "URDU.csv")]
    assert _run(data, *base, "--epochs", "0", "--out", str(tmp_path / "t0")) == 0
    assert (tmp_path / "t0" / "adapt_history.csv").read_text() == "epoch,d_loss,adv_loss,probe_accuracy\n"
    assert _run(data, *base, "--out", str(tmp_path / "t3")) == 0
    rows = _rows(tmp_path / "t3" / "adapt_history.csv")
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]


def test_missing_input_names_path(data, tmp_path, capsys):
    code = main(["cross", "--source", str(tmp_path / "absent.csv"), "--target", str(data / "data" / "URDU.csv")])
    assert code == 2
    assert "absent.csv" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["cross", "--source", "a.csv"],
    ["baseline", "--source", "a.csv", "--condition", "both"],
    ["frobnicate"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_config_key_names_line(data, tmp_path, capsys):
    (tmp_path / "exp.yaml").write_text("seed: 1\nlatent_dimm: 8\n")
    code = main(["baseline", "--source", str(data / "data" / "URDU.csv"), "--config", str(tmp_path / "exp.yaml")])
    assert code == 2
    assert "exp.yaml:2" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_3(data, tmp_path, capsys):
    (tmp_path / "exp.yaml").write_text(EXP.replace("autoencoder: {epochs: 2,", "autoencoder: {learning_rate: 1.0e+150, epochs: 2,"))
    code = main(["adapt-trace", "--source", str(data / "data" / "EMO-DB.csv"), "--target", str(data / "data" / "URDU.csv"),
                 "--config", str(tmp_path / "exp.yaml"), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "numerical error" in capsys.readouterr().err
