import json
import subprocess
import sys

import pytest

from ctmos.cli import main, read_config, resolve, build_parser
from ctmos.synthetic import hmm_text

TINY = """# tiny desk run
emb_size = 6
layer_sizes = 8
mixtures = 2
epochs = 2
batch_size = 4
bptt = 8
lr = 2.0
"""


@pytest.fixture
def corpus(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    text = hmm_text(3600, vocab_words=60, seed=9).splitlines(keepends=True)
    (raw / "train.txt").write_text("".join(text[:120]))
    (raw / "valid.txt").write_text("".join(text[120:150]))
    (raw / "test.txt").write_text("".join(text[150:]))
    out = tmp_path / "corpus"
    assert main(["preprocess", "--in", str(raw), "--out", str(out), "--cap", "80"]) == 0
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TINY)
    return out, cfg


def test_preprocess_single_file(tmp_path, capsys):
    raw = tmp_path / "raw.txt"
    raw.write_text("The cost rose 5 %\nabc\n")
    before = raw.read_bytes()
    assert main(["preprocess", "--in", str(raw), "--out", str(tmp_path / "c"), "--cap", "2000"]) == 0
    assert (tmp_path / "c" / "train.tokens").read_text() == "the cost rose N <eos>\nabc <eos>\n"
    assert (tmp_path / "c" / "vocab.tsv").exists()
    assert raw.read_bytes() == before
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["command"] == "preprocess" and manifest["config"]["cap"] == 2000
    assert str(raw) in manifest["input_digests"]
    assert capsys.readouterr().out.startswith("vocab_size\t")


def test_oracle_check_exit_status(tmp_path, capsys):
    code = main(["oracle", "check", "--samples", "1000", "--seed", "7", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    name, value = out.strip().split("\t")
    assert name == "max_relative_error" and float(value) < 1e-8


def test_oracle_mesh_writes_csv(tmp_path):
    assert main(["oracle", "mesh", "--resolution", "5", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("mesh_*.csv"))) == 6
    assert (tmp_path / "mesh_logit1.csv").read_text().startswith("p,tau,gradient,baseline_gradient")


def test_train_twice_gives_identical_logs(tmp_path, corpus):
    data, cfg = corpus
    logs = []
    for run in ("r1", "r2"):
        assert main(["train", "--config", str(cfg), "--seed", "1", "--in", str(data),
                     "--out", str(tmp_path / run)]) == 0
        rows = (tmp_path / run / "metrics.tsv").read_text().splitlines()
        logs.append([r.rsplit("\t", 1)[0] for r in rows])
    assert logs[0] == logs[1] and len(logs[0]) == 2
    assert (tmp_path / "r1" / "best.ckpt").read_bytes() == (tmp_path / "r2" / "best.ckpt").read_bytes()


def test_manifest_reproduces_run(tmp_path, corpus):
    data, cfg = corpus
    main(["train", "--config", str(cfg), "--seed", "4", "--in", str(data), "--out",
          str(tmp_path / "a")])
    main(["train", "--config", str(tmp_path / "a" / "manifest.json"), "--in", str(data),
          "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "epoch_2.ckpt").read_bytes() == \
        (tmp_path / "b" / "epoch_2.ckpt").read_bytes()


def test_eval_and_analyses(tmp_path, corpus, capsys):
    data, cfg = corpus
    run = tmp_path / "run"
    main(["train", "--config", str(cfg), "--in", str(data), "--out", str(run)])
    capsys.readouterr()
    ck = str(run / "best.ckpt")
    assert main(["eval", "--in", str(data), "--checkpoint", ck, "--split", "test",
                 "--out", str(tmp_path / "e")]) == 0
    assert capsys.readouterr().out.startswith("test_ppl\t")
    assert main(["analyze", "trajectories", "--in", str(data), "--run", str(run),
                 "--tokens", "5", "--out", str(tmp_path / "t")]) == 0
    assert len((tmp_path / "t" / "trajectories.tsv").read_text().splitlines()) == 1 + 10
    assert main(["analyze", "positions", "--in", str(data), "--checkpoint", ck, "--split", "train",
                 "--out", str(tmp_path / "p")]) == 0
    assert main(["analyze", "case-study", "--in", str(data), "--checkpoint", ck,
                 "--checkpoint-b", ck, "--context", "the cost rose", "--topk", "3",
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "case_study.tsv").exists()


def test_errors_are_one_machine_readable_line(tmp_path, corpus, capsys):
    data, _ = corpus
    other = tmp_path / "other"
    raw = tmp_path / "o.txt"
    raw.write_text(hmm_text(400, seed=99))
    main(["preprocess", "--in", str(raw), "--out", str(other)])
    main(["train", "--in", str(other), "--epochs", "1", "--batch", "2", "--bptt", "5",
          "--out", str(tmp_path / "orun")])
    capsys.readouterr()
    code = main(["eval", "--in", str(data), "--checkpoint", str(tmp_path / "orun" / "epoch_1.ckpt"),
                 "--out", str(tmp_path / "e")])
    err = capsys.readouterr().err.strip().split("\n")
    assert code == 1 and len(err) == 1
    assert err[0].split("\t")[:2] == ["error", "checkpoint-digest"]
    assert main(["train", "--in", str(data), "--lr", "-1", "--out", str(tmp_path / "x")]) == 1
    assert capsys.readouterr().err.startswith("error\tconfig\t")


def test_usage_errors_exit_two():
    for argv in (["frobnicate"], ["train", "--bogus"], ["oracle"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lr = 3.5\nepochs = 7  # comment\n")
    assert read_config(cfg) == {"lr": "3.5", "epochs": "7"}
    args = build_parser().parse_args(["train", "--config", str(cfg), "--lr", "9"])
    resolved = resolve(args)
    assert resolved["lr"] == 9.0 and resolved["epochs"] == 7 and resolved["clip"] == 0.25


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ctmos", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and res.stdout.strip()
