import csv
import json
import shutil
import subprocess
import sys

import pytest
from filelock import FileLock

from dkgcm import cli
from dkgcm.config import RunConfig


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--nodes", "6", "--length", "200", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def config_path(synth):
    cfg = RunConfig().replace(
        data__path=str(synth / "series.csv"), data__adjacency=str(synth / "adjacency.csv"),
        clustering__k=2, model__seq_len=8, model__horizon=4, model__hidden_dim=8,
        model__d_state=4, training__epochs=2, training__batch_size=16)
    path = synth / "config.json"
    cfg.save(path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--config", str(config_path), "--out", str(out)]) == 0
    return out


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestCluster:
    def test_k_zero_is_usage_error(self, synth, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["cluster", "--data", str(synth / "series.csv"), "--k", "0",
                      "--out", str(tmp_path)])
        assert exc.value.code == 2
        assert "positive integer" in capsys.readouterr().err

    def test_single_cluster(self, synth, tmp_path, capsys):
        assert cli.main(["cluster", "--data", str(synth / "series.csv"), "--k", "1",
                         "--out", str(tmp_path)]) == 0
        body = json.loads((tmp_path / "clusters.json").read_text())
        assert body["labels"] == [0] * 6
        assert "cluster 0: 6 nodes" in capsys.readouterr().out

    def test_outputs_and_idempotence(self, synth, tmp_path):
        args = ["cluster", "--data", str(synth / "series.csv"), "--adjacency",
                str(synth / "adjacency.csv"), "--k", "2"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        for name in ("dtw.csv", "cosine.csv", "clusters.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        dtw = _read_csv(a / "dtw.csv")
        assert len(dtw) == 6 and all(len(r) == 6 for r in dtw)
        labels = json.loads((a / "clusters.json").read_text())["labels"]
        truth = json.loads((synth / "labels.json").read_text())["labels"]
        assert len(set(zip(labels, truth))) == 2
        manifest = json.loads((a / "manifest.json").read_text())
        assert set(manifest["files"]) == {"dtw.csv", "cosine.csv", "clusters.json"}

    def test_k_exceeds_nodes(self, synth, tmp_path, capsys):
        assert cli.main(["cluster", "--data", str(synth / "series.csv"), "--k", "9",
                         "--out", str(tmp_path)]) == 1
        assert "exceeds" in capsys.readouterr().err

    def test_bad_data_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,x\n")
        assert cli.main(["cluster", "--data", str(bad), "--k", "1",
                         "--out", str(tmp_path / "o")]) == 1
        assert "error" in capsys.readouterr().err


class TestTrainEvalPredict:
    def test_train_outputs(self, trained):
        manifest = json.loads((trained / "manifest.json").read_text())
        expected = {"checkpoint.json", "checkpoint.bin", "losslog.csv", "losslog.svg",
                    "clusters.json", "val_metrics.json"}
        assert set(manifest["files"]) == expected
        for name in expected:
            assert (trained / name).exists()
        rows = _read_csv(trained / "losslog.csv")
        assert rows[0] == ["epoch", "variant", "epsilon", "loss"]
        assert len(rows) == 3

    def test_eval_horizon_slice(self, trained, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(trained / "checkpoint.json"),
                         "--horizons", "2", "--out", str(tmp_path)]) == 0
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert set(m["at"]) == {"2"}
        steps = m["per_horizon"][:2]
        assert m["at"]["2"]["mae"] == pytest.approx(sum(s["mae"] for s in steps) / 2)
        assert m["config_hash"] and m["seed"] == 0

    def test_eval_rejects_slice_beyond_horizon(self, trained, tmp_path, capsys):
        assert cli.main(["eval", "--checkpoint", str(trained / "checkpoint.json"),
                         "--horizons", "6", "--out", str(tmp_path)]) == 1
        assert "outside" in capsys.readouterr().err

    def test_eval_idempotent(self, trained, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["eval", "--checkpoint", str(trained / "checkpoint.json"),
                             "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "metrics.json").read_bytes() == \
            (tmp_path / "b" / "metrics.json").read_bytes()

    def test_eval_hash_mismatch(self, trained, config_path, tmp_path, capsys):
        other = RunConfig.load(config_path).replace(grpo__tau=0.5)
        other.save(tmp_path / "other.json")
        want = RunConfig.load(config_path).model_hash()
        assert cli.main(["eval", "--checkpoint", str(trained / "checkpoint.json"),
                         "--config", str(tmp_path / "other.json"),
                         "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert other.model_hash() in err and want in err

    def test_predict_shape_and_header(self, trained, synth, tmp_path):
        out = tmp_path / "forecast.csv"
        assert cli.main(["predict", "--checkpoint", str(trained / "checkpoint.json"),
                         "--window-csv", str(synth / "series.csv"), "--out", str(out)]) == 0
        rows = _read_csv(out)
        assert rows[0] == ["step", "n00", "n01", "n02", "n03", "n04", "n05"]
        assert len(rows) == 1 + 4 and all(len(r) == 7 for r in rows)
        json.loads((tmp_path / "manifest.json").read_text())

    def test_predict_short_window(self, trained, synth, tmp_path, capsys):
        lines = (synth / "series.csv").read_text().splitlines()[:4]
        short = tmp_path / "short.csv"
        short.write_text("\n".join(lines) + "\n")
        assert cli.main(["predict", "--checkpoint", str(trained / "checkpoint.json"),
                         "--window-csv", str(short), "--out", str(tmp_path / "o")]) == 1
        assert "need at least 8" in capsys.readouterr().err


def test_locked_output_dir(synth, tmp_path, capsys):
    lock = FileLock(str(tmp_path / cli.LOCK_NAME))
    with lock:
        assert cli.main(["cluster", "--data", str(synth / "series.csv"), "--k", "1",
                         "--out", str(tmp_path)]) == 1
    assert "locked" in capsys.readouterr().err
    assert not (tmp_path / "clusters.json").exists()


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"hiden_dim": 3}}))
    assert cli.main(["train", "--config", str(tmp_path / "c.json"),
                     "--out", str(tmp_path / "o")]) == 1
    assert "hiden_dim" in capsys.readouterr().err


@pytest.mark.slow
def test_ablate_and_sensitivity(config_path, tmp_path):
    assert cli.main(["ablate", "--config", str(config_path), "--epochs", "1",
                     "--out", str(tmp_path / "a")]) == 0
    rows = _read_csv(tmp_path / "a" / "ablation.csv")
    assert [r[0] for r in rows[1:]] == ["full", "no-clustering", "no-fbmamba", "no-grpo"]
    assert (tmp_path / "a" / "ablation.svg").exists()
    assert cli.main(["sensitivity", "--config", str(config_path), "--epochs", "1",
                     "--param", "k", "--values", "1", "2", "3",
                     "--out", str(tmp_path / "s")]) == 0
    rows = _read_csv(tmp_path / "s" / "sensitivity.csv")
    assert len(rows) == 1 + 3


@pytest.mark.skipif(shutil.which("dkgcm") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["dkgcm", "synth", "--nodes", "3", "--length", "50",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "dkgcm.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
