import itertools
import math

import numpy as np
import pytest

from weakqa.data import Passage, PassageStore, Question, build_vocab
from weakqa.reader import (MAX_SPAN_LEN, ReaderCache, encode_joint, init_reader, predict_answer,
                           reader_gradients, reader_loss, rerank, span_scores, span_text)

from conftest import make_toy_questions, make_toy_store


@pytest.fixture
def rp(toy_vocab, rng):
    return init_reader(len(toy_vocab), 4, rng, scale=1.0)


def test_singleton_softmaxes(rp, toy_vocab, toy_store):
    q = Question("q", "x", ("y",))
    store = PassageStore([Passage("a", "", "word")])
    assert rerank(rp, toy_vocab, q, [("p0",)], toy_store)[0] == 1.0
    vocab = build_vocab(store, [])
    small = init_reader(len(vocab), 3, np.random.default_rng(1))
    enc = encode_joint(small, vocab, Question("q", "", ("w",)), ["a"], store)
    assert enc.L == 2  # CLS + one evidence token
    ps, pe = span_scores(small, enc)
    assert len(ps) == 2
    p = np.exp(enc.U[1:2] @ small.w_start)
    assert abs((p / p.sum())[0] - 1.0) < 1e-12


def test_identical_chains_split_evenly(rp, toy_vocab, toy_store, toy_questions):
    p = rerank(rp, toy_vocab, toy_questions[0], [("p1", "p0"), ("p1", "p0")], toy_store)
    assert np.allclose(p, [0.5, 0.5], atol=1e-15)


def test_rerank_two_thirds(rp, toy_vocab, toy_store, toy_questions):
    q = toy_questions[0]
    e0 = encode_joint(rp, toy_vocab, q, ["p0"], toy_store)
    e1 = encode_joint(rp, toy_vocab, q, ["p5"], toy_store)
    diff = e0.cls_vec - e1.cls_vec
    rp.w_rank = diff * (math.log(2) / (diff @ diff))  # logit gap of ln 2
    p = rerank(rp, toy_vocab, q, [("p0",), ("p5",)], toy_store)
    assert abs(p[0] - 2 / 3) < 1e-12 and abs(p[1] - 1 / 3) < 1e-12


def test_zero_weights_give_zero_encoding(toy_vocab, toy_store, toy_questions):
    rp = init_reader(len(toy_vocab), 4, np.random.default_rng(0))
    rp.W_int[:] = 0.0
    enc = encode_joint(rp, toy_vocab, toy_questions[0], ["p0"], toy_store)
    assert not enc.U.any() and not enc.cls_vec.any()
    ps, _ = span_scores(rp, enc)
    assert np.allclose(ps, 1.0 / enc.L)


def test_shift_invariance_and_normalization(rp, toy_vocab, toy_store, toy_questions, rng):
    rp.w_start = rng.normal(size=4)
    enc = encode_joint(rp, toy_vocab, toy_questions[0], ["p1", "p0"], toy_store)
    ps, pe = span_scores(rp, enc)
    assert abs(ps.sum() - 1) < 1e-9 and abs(pe.sum() - 1) < 1e-9
    z = enc.U @ rp.w_start
    shifted = np.exp(z + 7.0 - np.max(z + 7.0))
    assert np.max(np.abs(shifted / shifted.sum() - ps)) < 1e-12


def test_offsets_reconstruct_answer(rp, toy_vocab, toy_store, toy_questions):
    enc = encode_joint(rp, toy_vocab, toy_questions[0], ["p1", "p0"], toy_store)
    a, b = enc.regions[1]
    words = [span_text(enc, toy_store, i, i) for i in range(a, b)]
    i = a + words.index("New")
    assert span_text(enc, toy_store, i, i + 1) == "New Brunswick"
    with pytest.raises(ValueError):
        span_text(enc, toy_store, enc.regions[0][1] - 1, a)  # crosses into a title
    assert encode_joint(rp, toy_vocab, toy_questions[0], ["p1", "p0"], toy_store).U.tolist() == enc.U.tolist()


def brute_predict(rp, vocab, q, chains, store):
    encs = [encode_joint(rp, vocab, q, c, store) for c in chains]
    logits = np.array([e.cls_vec @ rp.w_rank for e in encs])
    ci = min(range(len(chains)), key=lambda i: (-logits[i], i))
    enc = encs[ci]
    ps, pe = span_scores(rp, enc)
    best = None
    for a, b in enc.regions:
        for s, e in itertools.product(range(a, b), repeat=2):
            if s <= e < s + MAX_SPAN_LEN:
                key = (-(ps[s] * pe[e]), s, e - s)
                if best is None or key < best[0]:
                    best = (key, s, e)
    return ci, best[1], best[2]


@pytest.mark.parametrize("seed", range(8))
def test_predict_matches_exhaustive_search(seed, toy_vocab, toy_store, toy_questions):
    r = np.random.default_rng(seed)
    rp = init_reader(len(toy_vocab), 5, r, scale=1.0)
    rp.w_rank, rp.w_start, rp.w_end = (r.normal(size=5) for _ in range(3))
    chains = [("p1", "p0"), ("p3", "p2"), ("p4",), ("p5", "p4")]
    pred = predict_answer(rp, toy_vocab, toy_questions[seed % 2], chains, toy_store)
    assert (pred.chain_index, pred.start, pred.end) == brute_predict(rp, toy_vocab, toy_questions[seed % 2],
                                                                     chains, toy_store)
    assert pred.end - pred.start < MAX_SPAN_LEN


def test_hand_set_span(toy_vocab, toy_store, toy_questions):
    rp = init_reader(len(toy_vocab), 4, np.random.default_rng(3), scale=1.0)
    enc = encode_joint(rp, toy_vocab, toy_questions[0], ["p0"], toy_store)
    a, _ = enc.regions[0]
    s, e = a + 5, a + 6  # "New Brunswick"
    rp.w_start = np.linalg.lstsq(enc.U, 50.0 * (np.arange(enc.L) == s), rcond=None)[0]
    rp.w_end = np.linalg.lstsq(enc.U, 50.0 * (np.arange(enc.L) == e), rcond=None)[0]
    pred = predict_answer(rp, toy_vocab, toy_questions[0], [("p0",)], toy_store)
    assert (pred.start, pred.end, pred.answer_text) == (s, e, "New Brunswick")


def test_loss_closed_forms(rp, toy_vocab, toy_store, toy_questions):
    q = toy_questions[0]
    enc = encode_joint(rp, toy_vocab, q, ["p1", "p0"], toy_store)
    # zero rank/span weights: uniform everything, one occurrence
    loss = reader_loss(rp, toy_vocab, q, ("p1", "p0"), [("p5", "p4")], ["New Brunswick"], toy_store)
    assert abs(loss - (math.log(2) + 2 * math.log(enc.L))) < 1e-12
    # the answer occurs twice in p4 + p0; MML gives -log(2p)
    enc2 = encode_joint(rp, toy_vocab, q, ["p4", "p0"], toy_store)
    loss2 = reader_loss(rp, toy_vocab, q, ("p4", "p0"), [], ["New Brunswick"], toy_store)
    assert abs(loss2 - (-math.log(2 / enc2.L ** 2))) < 1e-12


def test_loss_requires_occurrence(rp, toy_vocab, toy_store, toy_questions):
    with pytest.raises(ValueError):
        reader_loss(rp, toy_vocab, toy_questions[0], ("p5",), [], ["New Brunswick"], toy_store)


def reader_fd_error(seed: int, h: float = 1e-5) -> float:
    """Worst relative gap between analytic and central-difference reader gradients."""
    store, questions = make_toy_store(), make_toy_questions()
    vocab = build_vocab(store, questions)
    r = np.random.default_rng(200 + seed)
    rp = init_reader(len(vocab), 4, r, scale=1.0)
    rp.w_rank, rp.w_start, rp.w_end = (r.normal(size=4) for _ in range(3))
    q = questions[seed % 2]
    pos = ("p1", "p0") if seed % 2 == 0 else ("p3", "p2")
    negs = [("p4", "p5"), ("p5",)]
    ans = list(q.answers)
    cache = ReaderCache(vocab, store)
    _, g = reader_gradients(rp, vocab, [(q, pos, negs, ans)], store, cache)
    worst = 0.0
    for name, block in rp.blocks().items():
        grad = getattr(g, name)
        for idx in np.ndindex(block.shape):
            if name == "E" and idx[0] == 0:
                continue  # UNK row is frozen
            old = block[idx]
            block[idx] = old + h
            up = reader_loss(rp, vocab, q, pos, negs, ans, store, cache)
            block[idx] = old - h
            dn = reader_loss(rp, vocab, q, pos, negs, ans, store, cache)
            block[idx] = old
            fd = (up - dn) / (2 * h)
            if abs(fd) < 1e-7 and abs(grad[idx]) < 1e-7:
                # tokens outside every chain: both sides are rounding noise around 0
                if abs(fd - grad[idx]) >= 1e-9:
                    return float("inf")
                continue
            worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-8))
    return worst


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(seed):
    assert reader_fd_error(seed) < 1e-4


def test_loss_decreases_under_descent(toy_vocab, toy_store, toy_questions):
    rp = init_reader(len(toy_vocab), 4, np.random.default_rng(4), scale=1.0)
    q = toy_questions[0]
    batch = [(q, ("p1", "p0"), [("p3", "p2")], list(q.answers))]
    losses = []
    for _ in range(12):
        loss, g = reader_gradients(rp, toy_vocab, batch, toy_store)
        losses.append(loss)
        for name, block in rp.blocks().items():
            block -= 1e-3 * getattr(g, name)
    assert all(b < a for a, b in zip(losses, losses[1:]))
