from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vpgkit import scenegen as sg
from vpgkit.evalkit import (
    ConstantModel, EchoModel, EvalRecord, cap_per_task, evaluate, match_option, match_option_detail,
    permute_images, read_records, records_from_pairs, report_csv, rouge_l, shuffle_probe, tfidf_scores,
    write_records, write_report,
)
from vpgkit.trainpipe import random_target_pairs
from vpgkit.vocab import KIND_OPTIONS


def lcs_oracle(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


# --- ROUGE-L ------------------------------------------------------------------


def test_rouge_examples():
    assert rouge_l("the red circle", "the red circle") == 1.0
    assert rouge_l("a b c", "d e f") == 0.0
    assert rouge_l("a red circle was added", "a red circle appeared") == pytest.approx(2 / 3, abs=1e-15)
    assert rouge_l("", "x") == 0.0 and rouge_l("x", "") == 0.0
    assert rouge_l("The RED", "the red") == 1.0


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.sampled_from("abcde"), max_size=20), st.lists(st.sampled_from("abcde"), max_size=20))
def test_rouge_matches_lcs_oracle(a, b):
    got = rouge_l(" ".join(a), " ".join(b))
    if not a or not b:
        assert got == 0.0
        return
    lcs = lcs_oracle(a, b)
    p, r = lcs / len(a), lcs / len(b)
    assert got == (0.0 if lcs == 0 else 2 * p * r / (p + r))
    if len(a) == len(b):
        assert got == rouge_l(" ".join(b), " ".join(a))


# --- option matching ------------------------------------------------------------


def test_match_option_examples():
    opts = ["red circle", "blue square", "green star"]
    assert match_option("green star", opts) == 2
    assert match_option("the answer is B", opts) == 1
    assert match_option("it is a blue square I think", opts) == 1
    assert match_option_detail("it is a blue square I think", opts).branch == "tfidf"


def test_tfidf_hand_values():
    opts = ["red circle", "blue square", "green star"]
    s = tfidf_scores("it is a blue square I think", opts)
    assert s == [0.0, pytest.approx(1.0, abs=1e-15), 0.0]
    # df=1 everywhere with N=3 gives idf = ln(3/2); "red blue" has half its weight on each of two options
    w = math.log(1.5)
    assert tfidf_scores("red blue", opts)[0] == pytest.approx(w * w / (math.sqrt(2) * w * math.sqrt(2) * w))


def test_match_option_patterns():
    opts = ["alpha", "beta", "gamma", "delta"]
    assert match_option("C", opts) == 2
    assert match_option("(D)", opts) == 3
    assert match_option("2", opts) == 1
    assert match_option("option A please", opts) == 0
    assert match_option("answer: 3", opts) == 2
    assert match_option("(1) because", opts) == 0


def test_match_option_ties_and_fallback():
    opts = ["red circle", "blue circle"]
    # "circle" appears in both options; "red" and "blue" tie at equal weight
    assert match_option("red blue", opts) == 0
    m = match_option_detail("nothing relevant", opts)
    assert (m.index, m.branch, m.degenerate) == (0, "fallback", True)
    with pytest.raises(ValueError):
        match_option("x", ["only"])


def test_match_option_exact_wins():
    for i, o in enumerate(KIND_OPTIONS):
        assert match_option(o, KIND_OPTIONS) == i


# --- records and evaluation -------------------------------------------------------


@pytest.fixture
def records(tmp_path):
    pairs = random_target_pairs(6, seed=5)
    return records_from_pairs(pairs, tmp_path), tmp_path


def test_record_validation():
    with pytest.raises(ValueError):
        EvalRecord("t", "c", "i", (), "r", ("a",), 0)
    with pytest.raises(ValueError):
        EvalRecord("t", "c", "i", (), "r", ("a", "b"), 2)
    with pytest.raises(ValueError):
        EvalRecord("t", "c", "i", (), "r", None, 0)
    with pytest.raises(ValueError):
        EvalRecord("t", "c", "i", (("video", "x"),), "r")


def test_record_roundtrip(records, tmp_path):
    recs, _ = records
    write_records(tmp_path / "r.jsonl", recs)
    assert read_records(tmp_path / "r.jsonl") == recs
    assert '"segments": [{"img": ' in (tmp_path / "r.jsonl").read_text().splitlines()[0]


def test_records_from_pairs_shape(records):
    recs, _ = records
    assert [r.task_id for r in recs] == ["difference"] * 6 + ["change_kind"] * 6 + ["caption"] * 6
    assert all(r.options is not None for r in recs if r.task_id == "change_kind")


def test_evaluate_echo_is_perfect(records):
    recs, root = records
    res = evaluate(EchoModel(), recs, root)
    assert [t.score for t in res.tasks] == [1.0, 1.0, 1.0]
    assert {t.metric for t in res.tasks} == {"rouge_l", "accuracy"}
    assert res.categories == {"discrimination": 1.0, "captioning": 1.0}


def test_evaluate_empty_and_deterministic(records):
    empty = evaluate(EchoModel(), [])
    assert empty.tasks == [] and empty.skipped == 0
    recs, root = records
    model = ConstantModel("the red circle was removed")
    assert report_csv(evaluate(model, recs, root)) == report_csv(evaluate(model, recs, root))


def test_evaluate_skips_missing_images(records):
    recs, root = records
    broken = EvalRecord("difference", "discrimination", "x", (("img", "images/missing.ppm"),), "y")
    res = evaluate(EchoModel(), recs + [broken], root)
    assert res.skipped == 1 and res.task("difference").n == 6


def test_report_csv_columns(records, tmp_path):
    recs, root = records
    res = evaluate(EchoModel(), recs, root)
    write_report(res, tmp_path / "r.csv", tmp_path / "r.svg")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "task,category,metric,n,score"
    assert lines[1] == "difference,discrimination,rouge_l,6,1.0"
    assert (tmp_path / "r.svg").read_text().startswith("<svg")


def test_cap_per_task(records):
    recs, _ = records
    capped = cap_per_task(recs, 2)
    assert [r.task_id for r in capped] == ["difference"] * 2 + ["change_kind"] * 2 + ["caption"] * 2


# --- shuffle probe --------------------------------------------------------------


def test_permute_images_keeps_text():
    r = EvalRecord("t", "c", "i", (("img", "a"), ("t", "mid"), ("img", "b")), "r")
    p = permute_images(r, [1, 0])
    assert p.segments == (("img", "b"), ("t", "mid"), ("img", "a"))
    with pytest.raises(ValueError):
        permute_images(r, [0, 0])


def test_shuffle_identity_zero_delta(records):
    recs, root = records
    rep = shuffle_probe(EchoModel(), recs, seed=1, root=root, identity=True)
    assert all(d == 0.0 for d in rep.deltas.values())
    assert rep.skipped == 6  # caption records have one image


def test_shuffle_constant_model_zero_delta(records):
    recs, root = records
    rep = shuffle_probe(ConstantModel("an object was added"), recs, seed=2, root=root)
    assert rep.deltas == {"difference": 0.0, "change_kind": 0.0}


def test_shuffle_is_seeded(records):
    recs, root = records

    class OrderSensitive:
        def respond(self, records, images):
            return ["red" if int(imgs[0].pixels.sum()) % 2 else "blue" for imgs in images]

    a = shuffle_probe(OrderSensitive(), recs, seed=3, root=root)
    b = shuffle_probe(OrderSensitive(), recs, seed=3, root=root)
    assert a.deltas == b.deltas
