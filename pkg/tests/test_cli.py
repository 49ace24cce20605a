"""CLI contract: layouts, exit codes, manifests, reproducibility."""

import json
import signal
import socket
import subprocess
import sys
import time
import urllib.request
from pathlib import Path

import pytest

from microvlm.checkpoint import save_checkpoint
from microvlm.cli import main
from microvlm.model import init_model

from test_model import tiny_config

RUN = [sys.executable, "-m", "microvlm.cli"]


def tree_digest(root: Path, skip=("manifest.json",)):
    """Map of relative path -> bytes for every file, manifests excluded."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.tlvm"
    save_checkpoint(init_model(tiny_config(seed=4)), path)
    return path


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    rc = main(["datagen", "--out", str(out), "--captions", "4", "--conversations", "3",
               "--turns", "2", "--vqa-open", "4", "--vqa-closed", "4",
               "--vqa-test-open", "2", "--vqa-test-closed", "2", "--seed", "5"])
    assert rc == 0
    return out


class TestDatagen:
    def test_layout_contract(self, small_corpus):
        for name in ("align.jsonl", "instruct.jsonl", "vqa_train.jsonl",
                     "vqa_test.jsonl", "manifest.json"):
            assert (small_corpus / name).exists(), name
        assert (small_corpus / "images").is_dir()
        assert list((small_corpus / "images").glob("*.ppm"))

    def test_same_seed_byte_identical_tree(self, small_corpus, tmp_path):
        rc = main(["datagen", "--out", str(tmp_path), "--captions", "4",
                   "--conversations", "3", "--turns", "2", "--vqa-open", "4",
                   "--vqa-closed", "4", "--vqa-test-open", "2",
                   "--vqa-test-closed", "2", "--seed", "5"])
        assert rc == 0
        assert tree_digest(tmp_path) == tree_digest(small_corpus)

    def test_manifest_reproduces_run(self, small_corpus, tmp_path):
        manifest = json.loads((small_corpus / "manifest.json").read_text())
        cfg = dict(manifest["config"])
        cfg["out"] = str(tmp_path)
        args = ["datagen"]
        for key, value in cfg.items():
            args += [f"--{key.replace('_', '-')}", str(value)]
        assert main(args) == 0
        assert tree_digest(tmp_path) == tree_digest(small_corpus)
        assert manifest["command"] == "datagen" and manifest["version"]

    def test_unwritable_dir_exit_2(self):
        rc = main(["datagen", "--out", "/proc/definitely/not/writable"])
        assert rc == 2

    def test_zero_closed_set(self, tmp_path, tiny_ckpt):
        rc = main(["datagen", "--out", str(tmp_path), "--captions", "1",
                   "--conversations", "1", "--vqa-open", "2", "--vqa-closed", "0",
                   "--vqa-test-open", "2", "--vqa-test-closed", "0", "--seed", "1"])
        assert rc == 0
        rows = (tmp_path / "vqa_test.jsonl").read_text().strip().splitlines()
        assert all(json.loads(r)["answer_type"] == "OPEN" for r in rows)


class TestTrain:
    def test_steps_zero_checkpoint_equals_input(self, small_corpus, tiny_ckpt, tmp_path):
        out = tmp_path / "out.tlvm"
        rc = main(["train", "--stage", "align", "--data", str(small_corpus / "align.jsonl"),
                   "--init", str(tiny_ckpt), "--out", str(out), "--steps", "0"])
        assert rc == 0
        assert out.read_bytes() == Path(tiny_ckpt).read_bytes()

    def test_instruct_without_init_exit_2(self, small_corpus, tmp_path):
        rc = main(["train", "--stage", "instruct",
                   "--data", str(small_corpus / "instruct.jsonl"),
                   "--out", str(tmp_path / "x.tlvm")])
        assert rc == 2

    def test_short_align_run_writes_artifacts(self, small_corpus, tiny_ckpt, tmp_path):
        out = tmp_path / "aligned.tlvm"
        rc = main(["train", "--stage", "align", "--data", str(small_corpus / "align.jsonl"),
                   "--init", str(tiny_ckpt), "--out", str(out), "--steps", "3",
                   "--batch-size", "2", "--quiet"])
        assert rc == 0
        assert out.exists()
        csv = tmp_path / "aligned.loss.csv"
        assert csv.exists() and len(csv.read_text().splitlines()) == 4
        manifest = json.loads((tmp_path / "aligned.tlvm.manifest.json").read_text())
        assert manifest["command"] == "train"
        assert str(out) in manifest["outputs"]

    def test_missing_data_exit_2(self, tiny_ckpt, tmp_path):
        rc = main(["train", "--stage", "align", "--data", "/nope.jsonl",
                   "--init", str(tiny_ckpt), "--out", str(tmp_path / "x.tlvm")])
        assert rc == 2

    def test_train_manifest_reproduces_checkpoint(self, small_corpus, tiny_ckpt, tmp_path):
        first = tmp_path / "a.tlvm"
        args = ["train", "--stage", "align", "--data", str(small_corpus / "align.jsonl"),
                "--init", str(tiny_ckpt), "--steps", "3", "--batch-size", "2",
                "--seed", "11", "--quiet"]
        assert main(args + ["--out", str(first)]) == 0
        manifest = json.loads((tmp_path / "a.tlvm.manifest.json").read_text())
        cfg = manifest["config"]
        second = tmp_path / "b.tlvm"
        rerun = ["train", "--stage", cfg["stage"], "--data", cfg["data"],
                 "--init", cfg["init"], "--steps", str(cfg["steps"]),
                 "--batch-size", str(cfg["batch_size"]), "--seed", str(cfg["seed"]),
                 "--quiet", "--out", str(second)]
        assert main(rerun) == 0
        assert second.read_bytes() == first.read_bytes()


class TestEval:
    def test_oracle_echo_scores_100(self, small_corpus, tmp_path, capsys):
        report = tmp_path / "report.json"
        rc = main(["eval", "--oracle-echo", "--split", str(small_corpus / "vqa_test.jsonl"),
                   "--report", str(report)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "open_recall_pct=100.0" in printed
        assert "closed_accuracy_pct=100.0" in printed
        data = json.loads(report.read_text())
        assert data["open_recall_pct"] == 100.0
        assert report.with_suffix(".txt").read_text().count("vqa_test") == 1

    def test_report_revalidates_from_per_sample_records(self, small_corpus, tiny_ckpt, tmp_path):
        report = tmp_path / "r.json"
        rc = main(["eval", "--model", str(tiny_ckpt),
                   "--split", str(small_corpus / "vqa_test.jsonl"),
                   "--report", str(report), "--max-new", "4"])
        assert rc == 0
        from microvlm.evaluation import EvalReport
        rep = EvalReport.from_json(report.read_text())
        assert rep.recompute() == (rep.open_recall_pct, rep.closed_accuracy_pct)

    def test_missing_split_exit_2(self, tiny_ckpt):
        assert main(["eval", "--model", str(tiny_ckpt), "--split", "/missing.jsonl"]) == 2


class TestGenerate:
    def test_greedy_repeatable(self, small_corpus, tiny_ckpt, capsys):
        image = next((small_corpus / "images").glob("*.ppm"))
        args = ["generate", "--model", str(tiny_ckpt), "--image", str(image),
                "--prompt", "what modality", "--max-new", "4"]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert main(args) == 0
        assert capsys.readouterr().out == first

    def test_max_new_one(self, tiny_ckpt, capsys):
        rc = main(["generate", "--model", str(tiny_ckpt), "--prompt", "hi",
                   "--max-new", "1"])
        assert rc == 0

    def test_missing_image_exit_2(self, tiny_ckpt, capsys):
        rc = main(["generate", "--model", str(tiny_ckpt), "--prompt", "hi",
                   "--image", "/does/not/exist.ppm"])
        assert rc == 2


class TestServe:
    def test_serve_health_sigterm_report(self, tiny_ckpt, tmp_path):
        report = tmp_path / "run_report.json"
        proc = subprocess.Popen(
            RUN + ["serve", "--model", str(tiny_ckpt), "--port", "0",
                   "--power-provider", "sim:18.9,62", "--report-out", str(report)],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True, cwd=tmp_path)
        try:
            line = proc.stdout.readline()
            assert "listening on" in line, line
            port = int(line.rsplit(":", 1)[1])
            with urllib.request.urlopen(f"http://127.0.0.1:{port}/healthz", timeout=10) as r:
                assert r.status == 200 and r.read() == b"ok"
            proc.send_signal(signal.SIGTERM)
            rc = proc.wait(timeout=20)
            assert rc == 0
        finally:
            if proc.poll() is None:
                proc.kill()
        data = json.loads(report.read_text())
        assert data["verdicts"] == ["OK"]
        assert (tmp_path / "run_report.json.manifest.json").exists()

    def test_port_in_use_exit_2(self, tiny_ckpt):
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        blocker.listen(1)
        port = blocker.getsockname()[1]
        try:
            proc = subprocess.run(
                RUN + ["serve", "--model", str(tiny_ckpt), "--port", str(port)],
                capture_output=True, text=True, timeout=60)
            assert proc.returncode == 2
            assert "cannot bind" in proc.stderr
        finally:
            blocker.close()


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("captions=2\nconversations=1\nvqa-open=1\nvqa_closed=1\n"
                   "vqa_test_open=1\nvqa_test_closed=1\nturns=1\nseed=9\n")
    out = tmp_path / "corpus"
    # flag --captions 3 beats the file's 2; file beats defaults elsewhere
    rc = main(["datagen", "--out", str(out), "--captions", "3", "--config", str(cfg)])
    assert rc == 0
    align_rows = (out / "align.jsonl").read_text().strip().splitlines()
    assert len(align_rows) == 3
    instruct_rows = (out / "instruct.jsonl").read_text().strip().splitlines()
    assert len(instruct_rows) == 1


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
