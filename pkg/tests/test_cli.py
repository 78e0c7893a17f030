import json
import subprocess
import sys

import pytest

from weakqa.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_config, build_parser, main
from weakqa.data import GenConfig
from weakqa.trainer import EmConfig

from conftest import TINY_GEN

GEN_FLAGS = [f"--{k.replace('_', '-')}={v}" for k, v in TINY_GEN.items()]
TRAIN_FLAGS = ["--dim=16", "--batch-size=8", "--reader-bootstrap-epochs=2", "--k-estep=5",
               "--beam-width=5", "--reader-bootstrap-k=10", "--early-stop-patience=0", "--seed=3"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(d)] + GEN_FLAGS) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--iterations=1"] + TRAIN_FLAGS) == EXIT_OK
    return out


def test_gen_data_files(data_dir):
    names = sorted(p.name for p in data_dir.iterdir())
    assert names == ["dev.jsonl", "gen_config.json", "passages.jsonl", "train.jsonl"]
    assert json.loads((data_dir / "gen_config.json").read_text())["seed"] == TINY_GEN["seed"]


def test_train_zero_iterations(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--iterations=0"] + TRAIN_FLAGS) == 0
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert len(stats) == 1 and stats[0]["iteration"] == 0
    assert (tmp_path / "checkpoints" / "iter000.ckpt").exists()


def test_eval_identity(data_dir, tmp_path):
    dev = [json.loads(line) for line in (data_dir / "dev.jsonl").read_text().splitlines()]
    with open(tmp_path / "r.jsonl", "w") as f:
        for q in dev:
            f.write(json.dumps({"question_id": q["id"], "chains": [{"pieces": q["gold_chain"]}]}) + "\n")
    with open(tmp_path / "p.jsonl", "w") as f:
        for q in dev:
            f.write(json.dumps({"question_id": q["id"], "answer": q["answers"][0]}) + "\n")
    rc = main(["eval", "--questions", str(data_dir / "dev.jsonl"), "--passages", str(data_dir / "passages.jsonl"),
               "--retrievals", str(tmp_path / "r.jsonl"), "--predictions", str(tmp_path / "p.jsonl"),
               "--out", str(tmp_path / "report.json")])
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["schema_version"] == 1
    assert [rep[k] for k in ("answer_recall", "passage_recall", "chain_recall", "exact_match")] == [1.0] * 4


def test_retrieve_answer_and_dump(data_dir, trained, tmp_path):
    ck = str(trained / "checkpoints" / "iter001.ckpt")
    assert main(["retrieve", "--checkpoint", ck, "--data", str(data_dir), "--out", str(tmp_path / "r.jsonl")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(rows) == TINY_GEN["num_dev"] and all(len(r["chains"]) == 10 for r in rows)
    assert main(["answer", "--checkpoint", ck, "--data", str(data_dir), "--pool=20",
                 "--out", str(tmp_path / "a.jsonl")]) == 0
    preds = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert all(0.0 <= p["span_prob"] <= 1.0 and len(p["chains"]) == 10 for p in preds)
    assert main(["dump-embeddings", "--checkpoint", ck, "--data", str(data_dir), "--k=10",
                 "--out", str(tmp_path / "e.tsv")]) == 0
    assert len((tmp_path / "e.tsv").read_text().splitlines()) == 11


def test_resume_continues(data_dir, trained, tmp_path):
    rc = main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--iterations=2",
               "--resume", str(trained / "checkpoints" / "iter001.ckpt")] + TRAIN_FLAGS)
    assert rc == EXIT_OK
    assert [s["iteration"] for s in json.loads((tmp_path / "stats.json").read_text())] == [0, 1, 2]


def test_warm_start_then_init(data_dir, tmp_path):
    ck = tmp_path / "enc.ckpt"
    assert main(["warm-start", "--data", str(data_dir), "--out", str(ck)] + TRAIN_FLAGS) == EXIT_OK
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "run"), "--iterations=0",
                 "--init", str(ck)] + TRAIN_FLAGS) == EXIT_OK
    # an encoder-only checkpoint cannot answer questions
    assert main(["retrieve", "--checkpoint", str(ck), "--data", str(data_dir), "--out", str(tmp_path / "x")]) \
        == EXIT_DATA


def test_ablate_reports_each_mode(data_dir, tmp_path):
    rc = main(["ablate", "--data", str(data_dir), "--modes", "none,answer", "--iterations=1",
               "--out", str(tmp_path)] + TRAIN_FLAGS)
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "ablation.json").read_text())
    assert sorted(rep["runs"]) == ["filter=answer,positive=top1", "filter=none,positive=top1"]
    assert all(len(v) == 2 for v in rep["runs"].values())


def test_baseline_tfidf(data_dir, capsys):
    assert main(["baseline-tfidf", "--data", str(data_dir)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= out["chain_recall"] <= out["passage_recall"] <= 1.0


@pytest.mark.parametrize("argv,code", [
    ([], EXIT_USAGE),
    (["train"], EXIT_USAGE),
    (["gen-data", "--out", "x", "--hops=5"], EXIT_USAGE),
    (["gen-data", "--out", "x", "--num-passages=many"], EXIT_USAGE),
    (["train", "--data", "/nonexistent", "--out", "x"], EXIT_DATA),
    (["eval", "--questions", "q.jsonl"], EXIT_USAGE),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_bad_checkpoint_is_data_error(data_dir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["retrieve", "--checkpoint", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "r")]) \
        == EXIT_DATA


def test_malformed_questions_is_data_error(data_dir, tmp_path):
    (tmp_path / "q.jsonl").write_text('{"id": "a"}\n')
    rc = main(["baseline-tfidf", "--data", str(data_dir), "--questions", str(tmp_path / "q.jsonl")])
    assert rc == EXIT_DATA


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\ndim = 32\nlr = 0.005\nseed = 1\nnum_passages = 7\n")
    p = build_parser()
    args = p.parse_args(["train", "--data", "d", "--out", "o", "--config", str(cfg_file), "--lr=0.1"])
    cfg = build_config(EmConfig, args, env={"WEAKQA_SEED": "9"})
    assert (cfg.dim, cfg.lr, cfg.seed) == (32, 0.1, 9)
    args = p.parse_args(["train", "--data", "d", "--out", "o", "--seed=4"])
    assert build_config(EmConfig, args, env={"WEAKQA_SEED": "9"}).seed == 4
    args = p.parse_args(["gen-data", "--out", "o", "--config", str(cfg_file)])
    assert build_config(GenConfig, args, env={}).num_passages == 7


def test_preset_then_flags():
    p = build_parser()
    args = p.parse_args(["train", "--data", "d", "--out", "o", "--preset", "desk", "--dim=8"])
    cfg = build_config(EmConfig, args, env={})
    assert (cfg.dim, cfg.negatives_per_question, cfg.lr) == (8, 3, 2e-3)
    assert build_config(EmConfig, p.parse_args(["train", "--data", "d", "--out", "o"]), env={}) == EmConfig()


def test_console_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "weakqa.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
