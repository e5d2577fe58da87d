import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from powercal.cli import main
from powercal.evaluation import parse_report
from powercal.scorer import load_params


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", "--preset", "benchmark", "--out-dir", str(out), "--quiet"]) == 0
    return out


def data_args(d):
    return ["--regions", str(d / "regions.txt"), "--tiles", str(d / "tiles.csv")]


def test_generate_writes_files_and_manifest(dataset):
    assert {p.name for p in dataset.iterdir()} == {"regions.txt", "tiles.csv", "manifest.json"}
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["seeds"] == {"synth": 42}
    for path, digest in manifest["outputs"].items():
        assert sha(dataset / path.rsplit("/", 1)[-1]) == digest


def test_generate_twice_same_digests(tmp_path):
    for name in ("a", "b"):
        assert main(["generate", "--preset", "benchmark", "--out-dir", str(tmp_path / name), "--quiet"]) == 0
    da = json.loads((tmp_path / "a" / "manifest.json").read_text())["outputs"]
    db = json.loads((tmp_path / "b" / "manifest.json").read_text())["outputs"]
    assert sorted(da.values()) == sorted(db.values())


def test_generate_bad_preset(tmp_path, capsys):
    assert main(["generate", "--preset", "nonsense", "--out-dir", str(tmp_path), "--quiet"]) == 1
    assert "nonsense" in capsys.readouterr().err


def test_usage_error_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 1


def test_missing_input_is_io_error(tmp_path):
    code = main(["eval", "--regions", str(tmp_path / "nope.txt"), "--tiles", str(tmp_path / "nope.csv"),
                 "--params", str(tmp_path / "p.ckpt"), "--quiet"])
    assert code == 2


def test_malformed_input_is_data_error(tmp_path, dataset, capsys):
    bad = tmp_path / "tiles.csv"
    bad.write_text((dataset / "tiles.csv").read_text().replace(",", ";", 5))
    code = main(["train", "--regions", str(dataset / "regions.txt"), "--tiles", str(bad),
                 "--out", str(tmp_path / "p.ckpt"), "--quiet"])
    assert code == 4


def test_divergence_exit_code(tmp_path, dataset):
    code = main(["train", *data_args(dataset), "--init", "noisy", "--lr", "1e6",
                 "--out", str(tmp_path / "p.ckpt"), "--quiet"])
    assert code == 3


def test_shape_command(capsys):
    assert main(["shape", "--a", "1", "--top-m", "2", "--quiet"]) == 0
    out = capsys.readouterr().out
    assert "0.6666666666666666" in out and "0.3333333333333333" in out


def test_pipeline_full(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["pipeline", "--preset", "benchmark", "--ablate", "full", "--out-dir", str(out), "--quiet"]) == 0
    rep = parse_report(out / "report.txt")
    assert len(rep.headline()) == 4
    assert all(-10 < v <= 1 for v in rep.headline().values())
    assert (out / "trace.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    for path, digest in {**manifest["inputs"], **manifest["outputs"]}.items():
        assert sha(Path(path)) == digest
    assert manifest["command"][:2] == ["powercal", "pipeline"]
    assert len(capsys.readouterr().out.splitlines()) == 4


def test_pipeline_none_has_no_trace(tmp_path):
    out = tmp_path / "run"
    assert main(["pipeline", "--preset", "benchmark", "--ablate", "none", "--out-dir", str(out), "--quiet"]) == 0
    assert not (out / "trace.csv").exists()
    assert parse_report(out / "report.txt").model == "none"
    assert load_params(out / "init.ckpt") == load_params(out / "params.ckpt")


def test_pipeline_intra_vs_full_and_report(tmp_path, capsys):
    for ablate in ("intra", "full"):
        assert main(["pipeline", "--preset", "benchmark", "--ablate", ablate,
                     "--out-dir", str(tmp_path / ablate), "--quiet"]) == 0
    reports = [str(tmp_path / a / "report.txt") for a in ("intra", "full")]
    assert main(["report", "--inputs", *reports, "--out", str(tmp_path / "table.txt")]) == 0
    rows = (tmp_path / "table.txt").read_text().splitlines()
    assert [r.split()[0] for r in rows[1:]] == ["intra", "full"]
    for a, row in zip(("intra", "full"), rows[1:]):
        head = parse_report(tmp_path / a / "report.txt").headline()
        assert float(row.split()[4]) == pytest.approx(head["country_municipality_r2"], abs=5e-5)


def test_train_then_eval(tmp_path, dataset, capsys):
    ckpt = tmp_path / "p.ckpt"
    assert main(["train", *data_args(dataset), "--init", "noisy", "--max-iters", "50",
                 "--out", str(ckpt), "--trace", str(tmp_path / "t.csv"), "--quiet"]) == 0
    assert "iterations=" in capsys.readouterr().out
    assert (tmp_path / "p.manifest.json").exists()
    assert main(["eval", *data_args(dataset), "--params", str(ckpt), "--scope", "country",
                 "--granularity", "grid", "--out", str(tmp_path / "r.txt"),
                 "--diff-csv", str(tmp_path / "d.csv"), "--quiet"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("country grid R2 = ")
    assert float(line.rsplit(" ", 1)[1]) == pytest.approx(parse_report(tmp_path / "r.txt").country_grid_r2, abs=5e-5)


def test_config_file_and_flag_precedence(tmp_path, dataset):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('[train]\nmax_iters = 3\ninit = "noisy"\n')
    assert main(["train", *data_args(dataset), "--config", str(cfg), "--out", str(tmp_path / "a.ckpt"),
                 "--trace", str(tmp_path / "a.csv"), "--quiet"]) == 0
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 1 + 4
    # an explicit flag wins over the file
    assert main(["train", *data_args(dataset), "--config", str(cfg), "--max-iters", "5",
                 "--out", str(tmp_path / "b.ckpt"), "--trace", str(tmp_path / "b.csv"), "--quiet"]) == 0
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 1 + 6


def test_config_unknown_key(tmp_path, dataset):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("learning_rat = 0.1\n")
    assert main(["train", *data_args(dataset), "--config", str(cfg), "--out", str(tmp_path / "p"), "--quiet"]) == 1


def test_synth_section_in_config(tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[synth]\nn_districts = 3\n")
    assert main(["generate", "--config", str(cfg), "--out-dir", str(tmp_path / "d"), "--quiet"]) == 0
    header = (tmp_path / "d" / "regions.txt").read_text().split("[municipalities]")[0]
    assert len(header.strip().splitlines()) == 3 + 3


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "powercal", "shape", "--preset", "rule_100_0", "--top-m", "3"],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert "a = 1.0" in proc.stdout
