import json

import pytest

from glame_lab import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("world", "gen", "--entities", 20, "--relations", 4, "--per-entity", 2, "--seed", 1,
               "--out", root / "world") == 0
    world = root / "world" / "graph.jsonl"
    assert run("corpus", "render", "--world", world, "--out", root / "corpus") == 0
    assert run("lm", "train", "--world", world, "--corpus", root / "corpus" / "corpus.jsonl", "--epochs", 1,
               "--layers", 2, "--d-model", 32, "--local-layers", 1, "--out", root / "model") == 0
    assert run("cases", "make", "--world", world, "--edits", 3, "--out", root / "cases") == 0
    return root, world


def test_world_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("world", "gen", "--entities", 15, "--relations", 3, "--per-entity", 2, "--seed", 4,
                   "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "graph.jsonl").read_bytes() == (tmp_path / "b" / "graph.jsonl").read_bytes()
    manifest = json.loads((tmp_path / "a" / "stage.json").read_text())
    assert manifest["stage"] == "world gen" and manifest["config"]["seed"] == 4


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"world": {"entities": 12, "relations": 3, "triples_per_entity": 2, "seed": 2}}))
    assert run("world", "gen", "--config", cfg, "--entities", 14, "--out", tmp_path / "w") == 0
    lines = (tmp_path / "w" / "graph.jsonl").read_text().splitlines()
    assert len(json.loads(lines[0])["entities"]) == 14


def test_stage_outputs(pipeline):
    root, _ = pipeline
    rows = [json.loads(x) for x in (root / "corpus" / "corpus.jsonl").read_text().splitlines()]
    assert all(r["words"][-1] == "." and r["answer"] >= 2 for r in rows)
    for stage in ("world", "corpus", "model", "cases"):
        assert (root / stage / "stage.json").exists()
    assert (root / "model" / "weights.bin").exists() and (root / "model" / "manifest.json").exists()


def test_recall_gate_exit_code(pipeline, capsys):
    root, world = pipeline
    assert run("lm", "recall", "--model", root / "model", "--world", world) == 0
    recall = json.loads(capsys.readouterr().out)["recall"]
    assert 0.0 <= recall <= 1.0
    if recall < 1.0:
        assert run("lm", "recall", "--model", root / "model", "--world", world, "--min-recall", 1.0) == 4


def test_edit_and_eval_runs(pipeline):
    root, world = pipeline
    cases = root / "cases" / "cases.jsonl"
    assert run("edit", "run", "--model", root / "model", "--world", world, "--cases", cases,
               "--method", "glame-mlp", "--layer", 0, "--k", 0, "--n", 1, "--m", 2, "--prefixes", 2,
               "--max-steps", 2, "--reports", "--out", root / "edits") == 0
    summary = json.loads((root / "edits" / "summary.json").read_text())
    assert summary["method"] == "glame_mlp" and summary["all_frozen"]
    assert list((root / "edits" / "glame_mlp" / "reports").glob("edit-*.json"))
    assert (root / "edits" / "scores.csv").read_text().startswith("method,case")
    assert run("eval", "run", "--model", root / "model", "--world", world, "--cases", cases,
               "--out", root / "eval") == 0
    scores = json.loads((root / "eval" / "scores.json").read_text())
    assert set(scores["scores"]) >= {"efficacy", "paraphrase", "neighborhood", "portability", "editing"}


def test_missing_inputs_are_config_errors(tmp_path):
    assert run("corpus", "render", "--world", tmp_path / "nope.jsonl") == 2
    assert run("lm", "recall", "--model", tmp_path, "--world", tmp_path / "nope.jsonl") == 2


def test_bad_config_documents(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("world", "gen", "--config", bad, "--out", tmp_path / "w") == 2
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"world": {"planets": 3}}))
    assert run("world", "gen", "--config", unknown, "--out", tmp_path / "w") == 2


def test_infeasible_world_is_config_error(tmp_path):
    assert run("world", "gen", "--entities", 5, "--relations", 2, "--per-entity", 3, "--out", tmp_path) == 2


def test_malformed_triples_are_config_errors(tmp_path):
    bad = tmp_path / "g.jsonl"
    bad.write_text('{"s": "a", "r": "x", "o": "b"}\n{oops\n')
    assert run("corpus", "render", "--world", bad, "--out", tmp_path / "c") == 2


def test_invalid_edit_config(pipeline):
    root, world = pipeline
    assert run("edit", "run", "--model", root / "model", "--world", world,
               "--cases", root / "cases" / "cases.jsonl", "--lambda", -1, "--out", root / "x") == 2
