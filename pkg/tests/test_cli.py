import json

import pytest

from docqa.cli import ConfigError, EXIT_FATAL, EXIT_OK, EXIT_RECORD_ERRORS, load_config, main

TINY = """
encoder: {hidden: 32, layers: 2, heads: 2, ff: 64, max_len: 160}
preprocess: {token_budget: 160, patch_grid: 2}
train: {epochs: 2, batch_size: 16, eval_every: 1}
generator: {documents: 12}
"""


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    cfg = root / "run.yaml"
    cfg.write_text(TINY)
    assert main(["generate", "--config", str(cfg), "--seed", "3", "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--seed", "3", "--dataset", str(root / "data"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root, cfg


def test_config_defaults_and_unknown_keys(tmp_path):
    assert load_config(None).encoder.hidden == 128
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochz: 3\n")
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    assert info.value.key == "train.epochz"
    bad.write_text("optimiser: {}\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_FATAL


def test_env_var_supplies_config(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "env.yaml"
    cfg.write_text("generator: {documents: 10, splits: {train: 1.0}}\n")
    monkeypatch.setenv("DOCQA_CONFIG", str(cfg))
    assert main(["generate", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert "train: 10 documents" in capsys.readouterr().out


def test_train_outputs(chain):
    root, _ = chain
    log = [json.loads(x) for x in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2] and "dev_em" in log[0]
    assert (root / "run" / "model.pt").exists() and (root / "run" / "config.json").exists()


def test_predict_and_evaluate(chain, capsys):
    root, cfg = chain
    test_set = str(root / "data" / "test.json")
    preds = root / "pred.jsonl"
    args = ["--config", str(cfg), "--checkpoint", str(root / "run" / "model.pt"), "--dataset", test_set]
    assert main(["predict", *args, "--out", str(preds)]) == EXIT_OK
    assert main(["predict", *args, "--out", str(root / "again.jsonl")]) == EXIT_OK
    assert preds.read_bytes() == (root / "again.jsonl").read_bytes()
    assert main(["evaluate", "--dataset", test_set, "--predictions", str(preds),
                 "--out", str(root / "report.json")]) == EXIT_OK
    assert "overall" in capsys.readouterr().out
    assert set(json.loads((root / "report.json").read_text())) == {"overall", "by_type", "counts"}


def test_evaluate_gold_against_itself(chain):
    root, _ = chain
    test_set = root / "data" / "test.json"
    from docqa.docmodel import load_dataset
    from docqa.inference import Answer, apply_scale
    lines = []
    for qa in load_dataset(test_set).qa_pairs:
        a = Answer(qa.answer_type, qa.gold_answer, qa.scale, apply_scale(qa.gold_answer, qa.scale)[0])
        lines.append(json.dumps(a.to_json(qa.qa_uid)))
    (root / "gold.jsonl").write_text("\n".join(lines) + "\n")
    assert main(["evaluate", "--dataset", str(test_set), "--predictions", str(root / "gold.jsonl"),
                 "--out", str(root / "gold_report.json")]) == EXIT_OK
    report = json.loads((root / "gold_report.json").read_text())
    assert report["overall"] == {"em": 100.0, "f1": 100.0}


def test_record_errors_exit_one(chain):
    root, cfg = chain
    raw = json.loads((root / "data" / "test.json").read_text())
    raw["qas"][0]["question"] = "word " * 300
    bad = root / "data" / "bad.json"
    bad.write_text(json.dumps(raw))
    code = main(["predict", "--config", str(cfg), "--checkpoint", str(root / "run" / "model.pt"),
                 "--dataset", str(bad), "--out", str(root / "bad.jsonl")])
    assert code == EXIT_RECORD_ERRORS
    first = json.loads((root / "bad.jsonl").read_text().splitlines()[0])
    assert "error" in first


def test_missing_paths_are_fatal(chain, tmp_path, capsys):
    root, cfg = chain
    assert main(["predict", "--checkpoint", str(tmp_path / "nope.pt"),
                 "--dataset", str(root / "data" / "test.json"), "--out", str(tmp_path / "p")]) == EXIT_FATAL
    assert "nope.pt" in capsys.readouterr().err
    assert main(["evaluate", "--dataset", str(root / "data" / "test.json"),
                 "--predictions", str(tmp_path / "missing.jsonl")]) == EXIT_FATAL


def test_inspect_arithmetic_tree_executes_to_gold(chain, capsys):
    root, cfg = chain
    from docqa.docmodel import AnswerType, load_dataset
    train_set = load_dataset(root / "data" / "train.json")
    qa = next(q for q in train_set.qa_pairs if q.answer_type is AnswerType.ARITHMETIC)
    assert main(["inspect", qa.qa_uid, "--config", str(cfg), "--dataset", str(root / "data" / "train.json"),
                 "--checkpoint", str(root / "run" / "model.pt")]) == EXIT_OK
    out = capsys.readouterr().out
    tree_line = next(line for line in out.splitlines() if line.startswith("gold tree"))
    assert float(tree_line.rsplit("=", 1)[1]) == pytest.approx(qa.gold_answer)
    assert "answer type" in out and "predicted" in out
