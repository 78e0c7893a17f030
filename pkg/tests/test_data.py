import json

import pytest
from hypothesis import given, strategies as st

from weakqa.data import (DataError, GenConfig, Passage, PassageStore, Question, Vocabulary,
                         answer_bearing_off_chain, build_vocab, check_gold_chains, generate_synthetic,
                         load_passages, load_questions, save_passages, save_questions, tokenize,
                         tokenize_with_offsets)
from weakqa.metrics import chain_recall, contains_answer

from conftest import TINY_GEN


@pytest.mark.parametrize("text,expected", [
    ("The Mist (2007)", ["the", "mist", "2007"]),
    ("", []),
    ("Sang-Wook Cheong", ["sang", "wook", "cheong"]),
    ("a_b", ["a", "b"]),
])
def test_tokenize_examples(text, expected):
    assert tokenize(text) == expected


@given(st.text(max_size=60))
def test_tokenize_idempotent(s):
    toks = tokenize(s)
    assert tokenize(" ".join(toks)) == toks


@given(st.text(max_size=60))
def test_offsets_reconstruct_tokens(s):
    for tok, a, b in tokenize_with_offsets(s):
        assert s[a:b].lower() == tok


def test_vocab_enumeration_and_unk():
    store = PassageStore([Passage("x", "", "a b"), Passage("y", "", "b c")])
    v = build_vocab(store, [Question("q", "c d", ("a",))])
    assert v.tokens == ["a", "b", "c", "d"]
    assert len(v) == 5
    assert v.id("zzz") == Vocabulary.UNK == 0
    assert sorted(v.index.values()) == [1, 2, 3, 4]


def test_vocab_empty_and_deterministic(toy_store, toy_questions):
    assert len(build_vocab(PassageStore(), [])) == 1
    assert build_vocab(toy_store, toy_questions).index == build_vocab(toy_store, toy_questions).index


def test_store_rejects_duplicates():
    with pytest.raises(DataError):
        PassageStore([Passage("a", "", "x"), Passage("a", "", "y")])


def test_store_iterates_in_id_order():
    store = PassageStore([Passage("b", "", "x"), Passage("a", "", "y")])
    assert [p.id for p in store] == ["a", "b"]


def test_jsonl_round_trip(tmp_path, toy_store, toy_questions):
    save_passages(tmp_path / "p.jsonl", toy_store)
    save_questions(tmp_path / "q.jsonl", toy_questions)
    back = load_passages(tmp_path / "p.jsonl")
    assert [p for p in back] == [p for p in toy_store]
    assert load_questions(tmp_path / "q.jsonl") == toy_questions


def _write(path, rows):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in rows) + "\n")


def test_missing_answers_names_line(tmp_path):
    f = tmp_path / "q.jsonl"
    _write(f, [{"id": "a", "question": "x", "answers": ["y"]}, {"id": "b", "question": "x"}])
    with pytest.raises(DataError, match=r":2: missing field 'answers'"):
        load_questions(f)


@pytest.mark.parametrize("rows,msg", [
    (["{not json"], "malformed JSON"),
    ([{"id": "a", "question": "x", "answers": []}], "no answers"),
    ([{"id": "a", "question": "x", "answers": ["y"]}, {"id": "a", "question": "z", "answers": ["y"]}],
     "duplicate question id"),
])
def test_bad_question_files(tmp_path, rows, msg):
    f = tmp_path / "q.jsonl"
    _write(f, rows)
    with pytest.raises(DataError, match=msg):
        load_questions(f)


def test_bad_passage_files(tmp_path):
    f = tmp_path / "p.jsonl"
    _write(f, [{"id": "a", "title": "", "text": "x"}, {"id": "a", "title": "", "text": "y"}])
    with pytest.raises(DataError, match="duplicate passage id"):
        load_passages(f)
    _write(f, [{"id": "a", "title": "", "text": ""}])
    with pytest.raises(DataError, match="empty passage text"):
        load_passages(f)


def test_check_gold_chains(toy_store, toy_questions):
    check_gold_chains(toy_questions, toy_store, hops=2)
    with pytest.raises(DataError):
        check_gold_chains(toy_questions, toy_store, hops=1)
    with pytest.raises(DataError):
        check_gold_chains([Question("q", "x", ("a",), ("p0", "nope"))], toy_store)


# ---------------------------------------------------------------------------
# generator


def test_generator_is_deterministic():
    a = generate_synthetic(GenConfig(**TINY_GEN))
    b = generate_synthetic(GenConfig(**TINY_GEN))
    assert [p for p in a[0]] == [p for p in b[0]]
    assert a[1] == b[1] and a[2] == b[2]


def test_generator_gold_chains_are_valid(tiny_world):
    store, train, dev = tiny_world
    qs = train + dev
    assert len(store) == TINY_GEN["num_passages"]
    assert (len(train), len(dev)) == (TINY_GEN["num_train"], TINY_GEN["num_dev"])
    check_gold_chains(qs, store, hops=2)
    for q in qs:
        hop1, hop2 = (store[p] for p in q.gold_chain)
        assert contains_answer(hop2.text, q.answers[:1])
        assert q.answers[0] in hop2.text  # verbatim
        # hop 1 names the question entity and the bridge; hop 2 names the bridge
        assert hop1.title in q.text
        assert hop2.title in hop1.text
    retr = {q.id: [q.gold_chain] for q in qs}
    assert chain_recall(retr, qs) == 1.0


def test_generator_single_hop():
    store, train, dev = generate_synthetic(GenConfig(**dict(TINY_GEN, hops=1)))
    assert all(len(q.gold_chain) == 1 for q in train + dev)
    for q in train + dev:
        assert q.answers[0] in store[q.gold_chain[0]].text


def test_generator_distractor_fraction_by_scan():
    cfg = GenConfig(num_passages=1000, num_train=150, num_dev=50, num_institutions=50, num_persons=50,
                    distractor_fraction=0.2, seed=3)
    store, train, dev = generate_synthetic(cfg)
    off = answer_bearing_off_chain(store, train + dev)
    # brute-force oracle, independent of the helper
    brute = set()
    for p in store:
        for q in train + dev:
            if p.id not in q.gold_chain and q.answers[0].lower() in p.text.lower() \
                    and contains_answer(p.text, q.answers):
                brute.add(p.id)
    assert off == brute
    assert len(off) >= 0.2 * 1000 - 1


@pytest.mark.parametrize("bad", [dict(hops=3), dict(distractor_fraction=1.5), dict(num_relations=0),
                                 dict(num_passages=20), dict(num_train=500)])
def test_generator_rejects_bad_configs(bad):
    with pytest.raises(ValueError):
        generate_synthetic(GenConfig(**dict(TINY_GEN, **bad)))
