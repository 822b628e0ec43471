"""Corpus pipeline tests: parsing, capping, normalization, splits, IO."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanpathgen.corpus import (
    MAX_STEPS,
    CorpusSplit,
    Fixation,
    NormalizedScanpath,
    Scanpath,
    Sentence,
    cap_outlier_durations,
    denormalize,
    normalize,
    parse_fixation_records,
    read_fixation_csv,
    read_normalized_jsonl,
    read_sentences_jsonl,
    split,
    write_fixation_csv,
    write_normalized_jsonl,
)
from scanpathgen.errors import ParseError, ValidationError


def _rows(*tuples):
    return [
        {
            "participant_id": p,
            "sentence_id": s,
            "word_index": str(w),
            "duration_ms": str(d),
        }
        for p, s, w, d in tuples
    ]


# --- parsing ---


def test_parse_single_record():
    paths = parse_fixation_records(_rows(("P1", "S3", 2, 180)))
    assert len(paths) == 1
    assert paths[0].participant_id == "P1"
    assert paths[0].sentence_id == "S3"
    assert paths[0].fixations == (Fixation(2, 180.0),)


def test_parse_preserves_regression_order():
    paths = parse_fixation_records(_rows(("P1", "S3", 4, 90), ("P1", "S3", 1, 120)))
    assert paths[0].word_indices == [4, 1]
    assert paths[0].durations_ms == [90.0, 120.0]


def test_parse_groups_by_participant_and_sentence():
    paths = parse_fixation_records(
        _rows(("P1", "S1", 0, 100), ("P2", "S1", 1, 100), ("P1", "S2", 0, 100),
              ("P1", "S1", 2, 100))
    )
    keys = [(p.participant_id, p.sentence_id) for p in paths]
    assert keys == [("P1", "S1"), ("P2", "S1"), ("P1", "S2")]
    assert paths[0].word_indices == [0, 2]


def test_parse_missing_field_names_row():
    rows = _rows(("P1", "S1", 0, 100))
    del rows[0]["duration_ms"]
    with pytest.raises(ParseError, match="row 1"):
        parse_fixation_records(rows)


def test_parse_rejects_bad_durations():
    with pytest.raises(ValidationError, match="row 1"):
        parse_fixation_records(_rows(("P1", "S1", 0, -5)))
    with pytest.raises(ValidationError):
        parse_fixation_records(_rows(("P1", "S1", 0, 0)))
    with pytest.raises(ParseError):
        parse_fixation_records(_rows(("P1", "S1", 0, "fast")))


def test_csv_round_trip(tmp_path):
    corpus = [
        Scanpath("P1", "S1", (Fixation(0, 123.5), Fixation(2, 80.0))),
        Scanpath("P2", "S1", (Fixation(1, 200.25),)),
    ]
    path = tmp_path / "fix.csv"
    write_fixation_csv(path, corpus)
    back = read_fixation_csv(path)
    assert back == corpus


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("participant,sentence,word,dur\nP1,S1,0,100\n")
    with pytest.raises(ParseError, match="header"):
        read_fixation_csv(path)


def test_sentences_jsonl(tmp_path):
    path = tmp_path / "sent.jsonl"
    path.write_text(
        '{"sentence_id": "S1", "text": "the cat sat"}\n'
        '{"sentence_id": "S2", "text": "dogs bark"}\n'
    )
    sents = read_sentences_jsonl(path)
    assert sents["S1"].words == ("the", "cat", "sat")
    assert len(sents["S2"]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"sentence_id": "S1"}\n')
    with pytest.raises(ParseError):
        read_sentences_jsonl(bad)


# --- capping ---


def test_cap_worked_example():
    # 99 fixations of 200 ms and one of 10000 ms; hand-computed linear
    # interpolation gives p99 = 200 + 0.01 * (10000 - 200) = 298.0
    fixations = [Fixation(0, 200.0) for _ in range(99)] + [Fixation(0, 10000.0)]
    corpus = [Scanpath("P1", f"S{i}", (fx,)) for i, fx in enumerate(fixations)]
    capped, p99 = cap_outlier_durations(corpus)
    assert p99 == pytest.approx(298.0, abs=1e-9)
    remaining = [fx.duration_ms for sp in capped for fx in sp.fixations]
    assert len(remaining) == 99
    assert max(remaining) == 200.0


def test_cap_degenerate_distribution():
    corpus = [Scanpath("P1", "S1", tuple(Fixation(0, 200.0) for _ in range(10)))]
    capped, p99 = cap_outlier_durations(corpus)
    assert p99 == 200.0
    assert sum(len(sp.fixations) for sp in capped) == 10


def test_cap_drops_everything_above_p99_and_empty_paths():
    corpus = [
        Scanpath("P1", "S1", tuple(Fixation(0, 100.0) for _ in range(200))),
        Scanpath("P1", "S2", (Fixation(0, 99999.0),)),
    ]
    capped, p99 = cap_outlier_durations(corpus)
    assert all(fx.duration_ms <= p99 for sp in capped for fx in sp.fixations)
    assert {sp.sentence_id for sp in capped} == {"S1"}


def test_cap_empty_corpus_errors():
    with pytest.raises(ValidationError):
        cap_outlier_durations([])


# --- normalization ---


def test_normalize_forced_arithmetic():
    sp = Scanpath("P1", "S1", (Fixation(3, 250.0),))
    sent = Sentence("S1", tuple(f"w{i}" for i in range(10)))
    nsp = normalize(sp, sent, p99=500.0)
    assert nsp.steps[0, 0] == pytest.approx(0.3)
    assert nsp.steps[0, 1] == pytest.approx(0.5)
    assert nsp.steps[0, 2] == 1.0
    assert nsp.true_length == 1


def test_normalize_padding_rule():
    sp = Scanpath("P1", "S1", tuple(Fixation(i, 100.0) for i in range(5)))
    sent = Sentence("S1", tuple(f"w{i}" for i in range(8)))
    nsp = normalize(sp, sent, p99=200.0)
    assert nsp.true_length == 5
    assert np.all(nsp.steps[5:] == 0.0)
    assert nsp.steps[4, 2] == 1.0
    assert np.flatnonzero(nsp.steps[:, 2]).tolist() == [4]
    nsp.validate()


def test_normalize_trimming_rule():
    sp = Scanpath("P1", "S1", tuple(Fixation(i % 10, 100.0) for i in range(100)))
    sent = Sentence("S1", tuple(f"w{i}" for i in range(10)))
    nsp = normalize(sp, sent, p99=200.0)
    assert nsp.true_length == MAX_STEPS
    assert nsp.steps[MAX_STEPS - 1, 2] == 1.0
    nsp.validate()


def test_normalize_clips_duration_and_validates_range():
    sp = Scanpath("P1", "S1", (Fixation(0, 400.0),))
    sent = Sentence("S1", ("a", "b"))
    nsp = normalize(sp, sent, p99=200.0)  # over-p99 duration clips to 1.0
    assert nsp.steps[0, 1] == 1.0


def test_normalize_word_index_out_of_range():
    sp = Scanpath("P1", "S1", (Fixation(5, 100.0),))
    sent = Sentence("S1", ("a", "b"))
    with pytest.raises(ValidationError, match="out of range"):
        normalize(sp, sent, p99=200.0)


@given(
    st.integers(2, 40).flatmap(
        lambda n: st.tuples(
            st.just(n),
            st.lists(
                st.tuples(st.integers(0, n - 1), st.floats(1.0, 1000.0, allow_nan=False)),
                min_size=1,
                max_size=90,
            ),
        )
    )
)
@settings(max_examples=100, deadline=None)
def test_normalize_positions_invert_exactly(case):
    n_words, fxs = case
    sp = Scanpath("P", "S", tuple(Fixation(w, d) for w, d in fxs))
    sent = Sentence("S", tuple(f"w{i}" for i in range(n_words)))
    nsp = normalize(sp, sent, p99=500.0)
    back = denormalize(nsp)
    expected = [w for w, _ in fxs][:MAX_STEPS]
    assert back.word_indices == expected
    nsp.validate()


# --- splits ---


def _toy_corpus(n_sentences, participants=("P1", "P2")):
    sentences = {
        f"S{i}": Sentence(f"S{i}", ("a", "b", "c")) for i in range(n_sentences)
    }
    paths = [
        Scanpath(p, f"S{i}", (Fixation(0, 100.0),))
        for i in range(n_sentences)
        for p in participants
    ]
    return paths, sentences


def test_split_deterministic_and_partitioned():
    paths, sentences = _toy_corpus(10)
    s1 = split(paths, sentences, (0.8, 0.1, 0.1), seed=7)
    s2 = split(paths, sentences, (0.8, 0.1, 0.1), seed=7)
    for part in ("train", "val", "test"):
        assert [sp.sentence_id for _, sp in s1.part(part)] == [
            sp.sentence_id for _, sp in s2.part(part)
        ]
    ids = lambda part: {sp.sentence_id for _, sp in s1.part(part)}
    assert len(ids("train")) == 8 and len(ids("val")) == 1 and len(ids("test")) == 1
    assert ids("train") | ids("val") | ids("test") == {f"S{i}" for i in range(10)}
    assert not (ids("train") & ids("val")) and not (ids("train") & ids("test"))
    # every scanpath lands somewhere, participants stay with their sentence
    assert len(s1.train) + len(s1.val) + len(s1.test) == len(paths)


def test_split_different_seeds_differ():
    paths, sentences = _toy_corpus(20)
    a = split(paths, sentences, (0.8, 0.1, 0.1), seed=1)
    b = split(paths, sentences, (0.8, 0.1, 0.1), seed=2)
    assert {sp.sentence_id for _, sp in a.test} != {sp.sentence_id for _, sp in b.test}


def test_split_invalid_inputs():
    paths, sentences = _toy_corpus(10)
    with pytest.raises(ValidationError):
        split(paths, sentences, (0.5, 0.5, 0.5), seed=0)
    with pytest.raises(ValidationError):
        split(paths, sentences, (0.9, 0.05, -0.05), seed=0)
    paths2, sentences2 = _toy_corpus(2)
    with pytest.raises(ValidationError):
        split(paths2, sentences2, (0.8, 0.1, 0.1), seed=0)


# --- normalized archive IO ---


def test_normalized_jsonl_round_trip(tmp_path):
    sp = Scanpath("P1", "S1", (Fixation(1, 100.0), Fixation(0, 250.0)))
    sent = Sentence("S1", ("a", "b", "c"))
    nsp = normalize(sp, sent, p99=400.0)
    path = tmp_path / "norm.jsonl"
    write_normalized_jsonl(path, [nsp])
    back = read_normalized_jsonl(path)
    assert len(back) == 1
    got = back[0]
    assert got.participant_id == "P1" and got.sentence_id == "S1"
    assert got.true_length == 2
    assert np.array_equal(got.steps, nsp.steps)
    assert got.p99_duration_ms == 400.0 and got.sentence_len == 3


def test_normalized_jsonl_rejects_bad_records(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"participant_id": "P1"}\n')
    with pytest.raises(ParseError):
        read_normalized_jsonl(path)


def test_normalized_validate_catches_violations():
    steps = np.zeros((MAX_STEPS, 3))
    steps[0] = (0.5, 0.5, 1.0)
    good = NormalizedScanpath(steps, 1, "P", "S", 100.0, 4)
    good.validate()
    bad = NormalizedScanpath(steps.copy(), 2, "P", "S", 100.0, 4)
    with pytest.raises(ValidationError):
        bad.validate()  # eos not at true_length - 1
    steps2 = steps.copy()
    steps2[40, 1] = 0.3
    with pytest.raises(ValidationError):
        NormalizedScanpath(steps2, 1, "P", "S", 100.0, 4).validate()  # pad leak
