"""Smoke test for the assocscan_py extension.

    cd crates/python && maturin develop && python python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import assocscan_py as ac

sys.path.insert(0, os.path.dirname(__file__))
import openbox_corpus  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "..", "core", "tests", "fixtures")


def check_taxonomy():
    t = ac.Taxonomy()
    assert t.prompt_count("two-base", "gender") == 8700
    assert t.prompt_count("single-base", "race") == 20880
    mini = ac.Taxonomy("builtin:mini")
    prompts = mini.expand_prompts("two-base", "gender")
    assert len(prompts) == mini.prompt_count("two-base", "gender")
    assert prompts[0]["rendered"]


def check_stats():
    assert abs(ac.chi_square_sf(3.841459, 1) - 0.05) < 1e-6
    r = ac.chi_square_independence([(40, 40), (4, 76)])
    assert r["df"] == 1 and r["p_value"] < 1e-6
    assert ac.distinctiveness_score(40, 4, 80) == 0.45
    assert ac.distinctiveness_score(3, 5, 80) == 0.0
    assert ac.homogeneity_completeness_v([0, 0, 0, 0], [0, 0, 1, 1]) == (0.0, 1.0, 0.0)
    try:
        ac.chi_square_sf(-1.0, 1)
    except ac.AssocscanError:
        pass
    else:
        raise AssertionError("negative statistic accepted")


def check_unify():
    s = math.sqrt(0.5)
    mapping = ac.unify(["a", "b", "c"], [[1.0, 0.0], [s, s], [0.0, 1.0]], threshold=0.7)
    assert mapping["a"] == mapping["b"] == mapping["c"]
    mapping = ac.unify(["a", "b", "c"], [[1.0, 0.0], [s, s], [0.0, 1.0]], threshold=0.8)
    assert len(set(mapping.values())) == 3


def check_pipeline(tmp):
    run_dir = os.path.join(tmp, "planted")
    summary = ac.run_all(os.path.join(FIXTURES, "planted", "run.toml"), run_dir)
    assert summary["bias_associations"] == 2
    kept = ac.bias_associations(run_dir)
    assert {(b["concept"], b["identity"]["label"]) for b in kept} == {("q", "Female")}
    again = ac.run_all(os.path.join(FIXTURES, "planted", "run.toml"), run_dir)
    assert sum(s["backend_calls"] for s in again["stages"]) == 0


def check_openbox_corpus(tmp):
    prompt = ("Write a short story about Emily and John, two characters "
              "at the location of clinic")
    rec = openbox_corpus.make_record(
        prompt, "gpt2", "Emily and John met at the clinic.",
        category="gender", location="clinic", location_category="Healthcare",
        descriptors=["Emily", "John"], replicate_index=0,
        created_at="2026-01-01T00:00:00+00:00")
    path = os.path.join(tmp, "stories.jsonl")
    openbox_corpus.emit_corpus_records([rec], path)
    loaded = ac.load_records(path)
    assert loaded[0]["id"] == rec["id"]
    rec["replicate_index"] = 1
    openbox_corpus.emit_corpus_records([rec], path)
    try:
        ac.load_records(path)
    except ac.AssocscanError:
        pass
    else:
        raise AssertionError("stale id accepted")


def check_eval():
    d = os.path.join(FIXTURES, "eval")
    row = ac.eval_stages(d, os.path.join(d, "gold.json"))["row"]
    assert abs(row["recall"] - 7 / 9) < 1e-12
    assert abs(row["exclusivity_accuracy"] - 0.9) < 1e-12


def main():
    with tempfile.TemporaryDirectory() as tmp:
        check_taxonomy()
        check_stats()
        check_unify()
        check_pipeline(tmp)
        check_openbox_corpus(tmp)
        check_eval()
    print("smoke test ok")


if __name__ == "__main__":
    main()
