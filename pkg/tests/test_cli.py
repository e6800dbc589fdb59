from pathlib import Path

import numpy as np
import pytest

from twinnet.cli import main
from twinnet.config import DEFAULT_ALPHAS, Config, ConfigError
from twinnet.model import load_checkpoint, save_checkpoint

TINY = ["--dataset.copy_count=40", "--dataset.copy_valid=10", "--dataset.copy_length=10",
        "--dataset.copy_offset=5", "--model.hidden=6", "--model.embed_dim=3", "--trainer.batch_size=10",
        "--trainer.epochs=2"]


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *TINY]) == 0
    return out


# ------------------------------------------------------------------ config

def test_config_roundtrip_and_types():
    cfg = Config().override(["trainer.lr=0.01", "--objective.normalize_by_length=yes",
                             "sweep.alphas=1.0, 0.5", "trainer.lr_decay_epochs=2,4"])
    again = Config.from_string(cfg.to_string())
    assert again.values == cfg.values
    assert cfg.get("trainer.lr") == 0.01 and cfg.get("objective.normalize_by_length") is True
    assert cfg.get("sweep.alphas") == (1.0, 0.5) and cfg.get("trainer.lr_decay_epochs") == (2, 4)


@pytest.mark.parametrize("item,key", [("trainer.lrr=1", "trainer.lrr"), ("foo.bar=1", "foo.bar"),
                                      ("trainer.epochs=ten", "trainer.epochs"), ("epochs=3", "epochs")])
def test_config_errors_name_the_key(item, key):
    with pytest.raises(ConfigError) as exc:
        Config().override([item])
    assert exc.value.key == key


def test_config_file_unknown_key():
    with pytest.raises(ConfigError, match="model.width"):
        Config.from_string("[model]\nwidth = 3\n")


def test_default_sweep_grid():
    assert DEFAULT_ALPHAS == (2.0, 1.5, 1.0, 0.5, 0.25, 0.1)
    assert Config().get("sweep.alphas") == DEFAULT_ALPHAS
    assert Config().get("objective.alpha") == 1.5


# ------------------------------------------------------------------ train

def test_missing_dataset_path_exits_2(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("TWINNET_DATA_DIR", raising=False)
    assert main(["train", "--dataset.name=mnist", "--out", str(tmp_path)]) == 2
    assert "dataset.path" in capsys.readouterr().err


def test_unknown_override_exits_2(tmp_path, capsys):
    assert main(["train", "--trainer.speed=3", "--out", str(tmp_path)]) == 2
    assert "trainer.speed" in capsys.readouterr().err
    assert main(["train", "stray", "--out", str(tmp_path)]) == 2
    assert main(["bogus"]) == 2


def test_zero_epochs_writes_initial_checkpoint(tmp_path):
    assert main(["train", "--out", str(tmp_path), *TINY, "--trainer.epochs=0"]) == 0
    assert load_checkpoint(tmp_path / "model.npz").model.spec.hidden == 6
    assert (tmp_path / "config.ini").exists()


def test_rerun_from_snapshot_reproduces_metrics(trained, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(trained / "config.ini"), "--out", str(again)]) == 0
    assert (again / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()
    assert (again / "config.ini").read_bytes() == (trained / "config.ini").read_bytes()


def test_resume_from_training_state(trained, tmp_path):
    out = tmp_path / "more"
    assert main(["train", "--config", str(trained / "config.ini"), "--trainer.epochs=3", "--out", str(out),
                 "--checkpoint", str(trained / "train_state.npz")]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[1:3] == (trained / "metrics.csv").read_text().splitlines()[1:3]


# ------------------------------------------------------------------ eval / sample

def test_eval_is_repeatable(trained, tmp_path, capsys):
    ck = str(trained / "model.npz")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e")]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e")]) == 0
    assert capsys.readouterr().out == first and "NLL" in first


def test_backward_parameters_do_not_affect_eval_or_samples(trained, tmp_path, capsys):
    ck = load_checkpoint(trained / "model.npz")
    for p in ck.model.backward_params().values():
        p.data[...] = 0.0
    zeroed = save_checkpoint(tmp_path / "zeroed.npz", ck.model, meta=ck.meta)
    outs = []
    for path, sub in ((trained / "model.npz", "a"), (zeroed, "b")):
        assert main(["eval", "--checkpoint", str(path), "--out", str(tmp_path / sub)]) == 0
        assert main(["sample", "--checkpoint", str(path), "--out", str(tmp_path / sub)]) == 0
        outs.append(((tmp_path / sub / "eval.json").read_text(), (tmp_path / sub / "samples.txt").read_text()))
    capsys.readouterr()
    assert outs[0] == outs[1]


def test_sample_is_seeded(trained, tmp_path):
    ck = str(trained / "model.npz")
    texts = []
    for seed in (3, 3, 4):
        out = tmp_path / f"s{len(texts)}"
        assert main(["sample", "--checkpoint", ck, "--out", str(out), f"--sample.seed={seed}", "--sample.n=2"]) == 0
        texts.append((out / "samples.txt").read_text())
    assert texts[0] == texts[1] != texts[2]
    assert all(len(line.split()) == 10 for line in texts[0].splitlines())


def test_pgm_grid(tmp_path):
    from twinnet.cli import write_pgm_grid
    imgs = np.zeros((5, 784), int)
    imgs[0, 0] = 1
    lines = write_pgm_grid(tmp_path / "g.pgm", imgs, cols=4).read_text().splitlines()
    assert lines[:3] == ["P2", "117 59", "1"]
    assert lines[3 + 1].split()[1] == "1"


def test_missing_checkpoint_exits_2(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.npz")]) == 2
    assert main(["eval"]) == 2
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    assert main(["sample", "--checkpoint", str(tmp_path / "junk.npz")]) == 2


# ------------------------------------------------------------------ sweep / diagnose

def test_sweep_marks_min_valid_row(tmp_path, capsys):
    assert main(["sweep", "--out", str(tmp_path), *TINY, "--trainer.epochs=1", "--sweep.alphas=1.5,0.1"]) == 0
    rows = [r.split(",") for r in (tmp_path / "sweep.csv").read_text().splitlines()[1:]]
    vals = [float(r[1]) for r in rows]
    assert [r[3] for r in rows].count("*") == 1
    assert rows[vals.index(min(vals))][3] == "*"


def test_single_alpha_sweep_is_best(tmp_path, capsys):
    assert main(["sweep", "--out", str(tmp_path), *TINY, "--trainer.epochs=1", "--sweep.alphas=0.5"]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].endswith(",*")


def test_diagnose_writes_records(trained, tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["diagnose", "--checkpoint", str(trained / "model.npz"), "--out", str(out)]) == 0
    lines = (out / "records.csv").read_text().splitlines()
    assert lines[0] == "seq_id,t,token,segment,penalty,nll" and len(lines) == 1 + 10 * 10


def test_diagnose_text_writes_word_stats(tmp_path, capsys):
    corpus = tmp_path / "c.txt"
    corpus.write_text(("the cat sat on the mat and the dog sat on the log " * 40), encoding="utf-8")
    run = tmp_path / "run"
    args = ["--dataset.name=text", f"--dataset.path={corpus}", "--dataset.seq_len=40", "--model.hidden=8",
            "--trainer.epochs=1", "--trainer.batch_size=8", "--diagnose.rare_cutoff=3"]
    assert main(["train", "--out", str(run), *args]) == 0
    out = tmp_path / "d"
    assert main(["diagnose", "--checkpoint", str(run / "model.npz"), "--out", str(out)]) == 0
    for f in ("records.csv", "symbol_stats.csv", "word_stats.csv", "word_histogram.csv"):
        assert (out / f).exists(), f
    assert main(["sample", "--checkpoint", str(run / "model.npz"), "--out", str(out), "--sample.n=1"]) == 0
    assert len((out / "samples.txt").read_text().rstrip("\n")) == 40


# ------------------------------------------------------------------ gradcheck

def test_gradcheck_passes_and_reports_partition(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for tag in ("(a)", "(b)", "(c)", "twin", "zeros-AR", "overall: PASS"):
        assert tag in out


def test_gradcheck_detects_corrupted_op(capsys):
    assert main(["gradcheck", "--corrupt", "lstm_sequence", "--gradcheck.hidden=4"]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["gradcheck", "--corrupt", "nosuchop"]) == 2


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.ini")),
                         ids=lambda p: p.name)
def test_example_configs_parse(path):
    Config.from_file(path)
