import json

import numpy as np
import pytest

from mmtm import cli, pca_init, synth
from mmtm.pca_init import PretrainedEmbeddings


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "train.jsonl"
    synth.write_corpus(path, synth.generate_raw(12, seed=31))
    return path


@pytest.fixture(scope="module")
def test_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "test.jsonl"
    synth.write_corpus(path, synth.generate_raw(6, seed=32))
    return path


def fast_train_flags(out_dir, seed=5):
    return ["--out", str(out_dir), "--dim", "16", "--seed", str(seed),
            "--batch-size", "8", "--pretrain-epochs", "1",
            "--finetune-epochs", "2", "--finetune-lr", "1e-3"]


class TestAugment:
    def test_happy_path(self, corpus_path, tmp_path, capsys):
        rc = cli.main(["augment", "--corpus", str(corpus_path),
                       "--out", str(tmp_path)])
        assert rc == 0
        for task in ("pre", "in", "post"):
            lines = (tmp_path / f"task_{task}.jsonl").read_text().splitlines()
            assert len(lines) == 12
        assert (tmp_path / "manifest.json").exists()

    def test_corrupt_line_quarantined_exit_zero(self, tmp_path, capsys):
        corpus = tmp_path / "c.jsonl"
        corpus.write_text(
            json.dumps({"id": "ok", "question": "had 5 got 3",
                        "equation": "number0 + number1", "answer": 8})
            + "\nnot json at all\n", encoding="utf-8")
        rc = cli.main(["augment", "--corpus", str(corpus),
                       "--out", str(tmp_path / "out")])
        assert rc == 0
        q = (tmp_path / "out" / "quarantine.jsonl").read_text().splitlines()
        assert len(q) == 1
        assert "warning" in capsys.readouterr().err

    def test_missing_file_exit_2(self, tmp_path):
        rc = cli.main(["augment", "--corpus", str(tmp_path / "nope.jsonl"),
                       "--out", str(tmp_path)])
        assert rc == 2


class TestTrain:
    def test_default_run_emits_two_checkpoints(self, corpus_path, tmp_path):
        rc = cli.main(["train", "--corpus", str(corpus_path)]
                      + fast_train_flags(tmp_path))
        assert rc == 0
        assert (tmp_path / "checkpoint_pretrain.mmtm").exists()
        assert (tmp_path / "checkpoint_final.mmtm").exists()
        assert (tmp_path / "trainlog_pretrain.jsonl").exists()
        assert (tmp_path / "trainlog_finetune.jsonl").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 5
        assert "sha256" in manifest["inputs"]["corpus"]

    def test_no_pretrain_arm(self, corpus_path, tmp_path):
        rc = cli.main(["train", "--corpus", str(corpus_path), "--no-pretrain"]
                      + fast_train_flags(tmp_path))
        assert rc == 0
        assert not (tmp_path / "checkpoint_pretrain.mmtm").exists()
        assert (tmp_path / "checkpoint_final.mmtm").exists()

    def test_idempotent_given_same_seed(self, corpus_path, tmp_path):
        for sub in ("a", "b"):
            rc = cli.main(["train", "--corpus", str(corpus_path)]
                          + fast_train_flags(tmp_path / sub))
            assert rc == 0
        assert ((tmp_path / "a" / "checkpoint_final.mmtm").read_bytes()
                == (tmp_path / "b" / "checkpoint_final.mmtm").read_bytes())
        assert ((tmp_path / "a" / "trainlog_finetune.jsonl").read_bytes()
                == (tmp_path / "b" / "trainlog_finetune.jsonl").read_bytes())

    def test_env_seed_fallback(self, corpus_path, tmp_path, monkeypatch):
        monkeypatch.setenv("MMTM_SEED", "99")
        rc = cli.main(["train", "--corpus", str(corpus_path), "--out",
                       str(tmp_path), "--dim", "16", "--batch-size", "8",
                       "--pretrain-epochs", "1", "--finetune-epochs", "1"])
        assert rc == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 99

    def test_config_file_flags_win(self, corpus_path, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"d_model": 8, "finetune_epochs": 1}))
        rc = cli.main(["train", "--corpus", str(corpus_path), "--config",
                       str(cfg), "--dim", "16", "--out", str(tmp_path / "o"),
                       "--batch-size", "8", "--pretrain-epochs", "1"])
        assert rc == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["d_model"] == 16  # flag beat the config file
        assert manifest["plan"]["finetune_epochs"] == 1  # file value kept


@pytest.fixture(scope="module")
def trained_dir(corpus_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert cli.main(["train", "--corpus", str(corpus_path)]
                    + fast_train_flags(out)) == 0
    return out


class TestEval:
    def test_table_and_report(self, trained_dir, test_path, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        rc = cli.main(["eval", "--checkpoint",
                       str(trained_dir / "checkpoint_final.mmtm"),
                       "--test", str(test_path), "--report", str(report_path)])
        assert rc == 0
        out = capsys.readouterr().out
        for row in ("Full Set", "One-Op", "Two-Op", "ADD", "SUB", "MUL", "DIV"):
            assert row in out
        report = json.loads(report_path.read_text())
        assert report["total"] == 6

    def test_attention_out_one_json_per_record(self, trained_dir, test_path,
                                               tmp_path):
        att = tmp_path / "att"
        rc = cli.main(["eval", "--checkpoint",
                       str(trained_dir / "checkpoint_final.mmtm"),
                       "--test", str(test_path), "--attention-out", str(att)])
        assert rc == 0
        assert len(list(att.glob("*.json"))) == 6

    def test_corrupt_checkpoint_exit_3(self, test_path, tmp_path):
        bad = tmp_path / "bad.mmtm"
        bad.write_bytes(b"MMTMgarbage")
        rc = cli.main(["eval", "--checkpoint", str(bad), "--test",
                       str(test_path)])
        assert rc == 3


class TestSweep:
    def test_grid_and_resume(self, corpus_path, test_path, tmp_path):
        emb_path = tmp_path / "emb.tsv"
        rng = np.random.default_rng(0)
        words = set()
        for line in corpus_path.read_text().splitlines():
            words.update(json.loads(line)["question"].split())
        pca_init.write_embeddings_tsv(emb_path, PretrainedEmbeddings(
            {w: rng.normal(size=24) for w in sorted(words)}, 24))
        args = ["sweep", "--corpus", str(corpus_path), "--test", str(test_path),
                "--dims", "8,16", "--layers", "1", "--embeddings", str(emb_path),
                "--out", str(tmp_path / "sweep"), "--seed", "3",
                "--batch-size", "8", "--pretrain-epochs", "1",
                "--finetune-epochs", "1"]
        assert cli.main(args) == 0
        csv_lines = (tmp_path / "sweep" / "sweep.csv").read_text().splitlines()
        assert csv_lines[0] == "dim,layers,init,accuracy"
        assert len(csv_lines) == 1 + 2 * 1 * 2  # dims x layers x (scratch, pca)
        # resume: nothing left to do, rows unchanged
        assert cli.main(args) == 0
        assert (tmp_path / "sweep" / "sweep.csv").read_text().splitlines() == \
            csv_lines
