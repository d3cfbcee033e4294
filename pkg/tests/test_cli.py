import json

import pytest

from mmtcbn import numcore as nc
from mmtcbn.cli import main


@pytest.fixture
def corpus_dir(tmp_path):
    assert main(["synth", "--n", "10", "--seed", "3", "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


@pytest.fixture
def quick_cfg(tmp_path):
    path = tmp_path / "quick.cfg"
    path.write_text("max_steps = 4\neval_every = 2\nbatch_size = 4\npretrain_steps = 3\n")
    return path


def test_synth_writes_files(corpus_dir):
    assert len((corpus_dir / "corpus.src").read_text().splitlines()) == 10
    assert len((corpus_dir / "corpus.tgt").read_text().splitlines()) == 10
    assert len(list((corpus_dir / "images").glob("*.mmti"))) == 10


def test_synth_is_reproducible(tmp_path, corpus_dir):
    main(["synth", "--n", "10", "--seed", "3", "--out", str(tmp_path / "again")])
    for f in ["corpus.src", "corpus.tgt", "corpus.idx", "images/corpus_000004.mmti"]:
        assert (corpus_dir / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_synth_rejects_zero(tmp_path):
    assert main(["synth", "--n", "0", "--out", str(tmp_path / "z")]) == 2


def test_unknown_variant_is_usage_error(corpus_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "nope", "--data", str(corpus_dir), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2
    assert "cbn_enc_att" in capsys.readouterr().err


def test_config_error_reports_line(corpus_dir, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("batch_size = 4\nlearning_rate = fast\n")
    code = main(["train", "--variant", "cbn_pool5", "--config", str(bad), "--data", str(corpus_dir),
                 "--out", str(tmp_path / "o")])
    assert code == 2 and "line 2" in capsys.readouterr().err


def test_train_translate_score(corpus_dir, quick_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--variant", "cbn_pool5", "--config", str(quick_cfg), "--data", str(corpus_dir),
                 "--out", str(out)]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,train_loss,dev_loss,dev_bleu" and len(rows) == 3
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["variant"] == "cbn_pool5" and "config" in manifest and "git" in manifest
    capsys.readouterr()

    src = (corpus_dir / "corpus.src").read_text().splitlines()
    assert main(["translate", "--checkpoint", str(out / "checkpoint"), "--input",
                 str(corpus_dir / "corpus.src"), "--beam", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(src)

    (tmp_path / "empty.src").write_text("")
    assert main(["translate", "--checkpoint", str(out / "checkpoint"), "--input",
                 str(tmp_path / "empty.src")]) == 0
    assert capsys.readouterr().out == ""

    cands = tmp_path / "cand.txt"
    cands.write_text("\n".join(lines) + "\n")
    assert main(["score", "--candidates", str(cands), "--references", str(corpus_dir / "corpus.tgt")]) == 0
    assert capsys.readouterr().out.startswith("BLEU ")


def test_translate_without_images_is_error(corpus_dir, quick_cfg, tmp_path):
    out = tmp_path / "run"
    main(["train", "--variant", "cbn_pool5", "--config", str(quick_cfg), "--data", str(corpus_dir),
          "--out", str(out)])
    (tmp_path / "x.src").write_text("the mark sits here\n")
    assert main(["translate", "--checkpoint", str(out / "checkpoint"), "--input", str(tmp_path / "x.src")]) == 2


def test_vocab_mismatch_is_compatibility_error(corpus_dir, quick_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--variant", "text_only", "--config", str(quick_cfg), "--data", str(corpus_dir),
          "--out", str(out)])
    vocab = out / "checkpoint" / "tgt.vocab"
    vocab.write_text(vocab.read_text() + "extra\n")
    assert main(["translate", "--checkpoint", str(out / "checkpoint"), "--input",
                 str(corpus_dir / "corpus.src")]) == 2
    assert "CompatibilityError" in capsys.readouterr().err


def test_resume_continues(corpus_dir, quick_cfg, tmp_path):
    out = tmp_path / "run"
    main(["train", "--variant", "text_only", "--config", str(quick_cfg), "--data", str(corpus_dir),
          "--out", str(out)])
    assert main(["train", "--variant", "text_only", "--config", str(quick_cfg), "--data", str(corpus_dir),
                 "--out", str(tmp_path / "more"), "--resume", str(out / "state"), "--max-steps", "6"]) == 0
    rows = (tmp_path / "more" / "metrics.csv").read_text().splitlines()
    assert rows[1].startswith("6,")


def test_gradcheck_single_variant_passes(capsys):
    assert main(["gradcheck", "--variant", "text_only"]) == 0
    assert "pass" in capsys.readouterr().out


def test_gradcheck_detects_sign_flip(monkeypatch):
    orig = nc.tanh

    def flipped(a):
        out = orig(a)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: inner(-g)
        return out

    monkeypatch.setattr(nc, "tanh", flipped)
    assert main(["gradcheck", "--variant", "text_only"]) == 1


def test_gradcheck_rejects_zero_eps():
    assert main(["gradcheck", "--eps", "0"]) == 2
