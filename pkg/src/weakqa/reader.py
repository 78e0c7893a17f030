"""Reader: chain reranking and span extraction over a question-evidence interaction layer."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .data import PassageStore, Question, Vocabulary, tokenize, tokenize_with_offsets
from .encoder import NumericError
from .metrics import normalize_answer

MAX_SPAN_LEN = 10

CLS, QUESTION, TITLE, EVIDENCE = "cls", "question", "title", "evidence"


@dataclass
class ReaderParams:
    """Reader weights; the reader owns its own token embedding table ``E``."""

    E: np.ndarray
    W_int: np.ndarray  # d x 3d
    w_rank: np.ndarray
    w_start: np.ndarray
    w_end: np.ndarray

    @property
    def d(self) -> int:
        return self.E.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "ReaderParams":
        return ReaderParams(**{k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self) -> "ReaderParams":
        return ReaderParams(**{k: np.zeros_like(v) for k, v in self.blocks().items()})


def init_reader(vocab_size: int, d: int, rng: np.random.Generator, scale: float = 0.5) -> ReaderParams:
    E = rng.normal(0.0, scale, size=(vocab_size, d))
    E[0] = 0.0
    W_int = rng.normal(0.0, 1.0 / np.sqrt(3 * d), size=(d, 3 * d))
    return ReaderParams(E=E, W_int=W_int, w_rank=np.zeros(d), w_start=np.zeros(d), w_end=np.zeros(d))


class ReaderCache:
    """Memoised token ids / offsets for passages and answer occurrences."""

    def __init__(self, vocab: Vocabulary, store: PassageStore):
        self.vocab = vocab
        self.store = store
        self._pieces: dict[str, tuple] = {}
        self._occ: dict[tuple, list[tuple[int, int]]] = {}
        self._q: dict[str, np.ndarray] = {}

    def question(self, text: str) -> np.ndarray:
        ids = self._q.get(text)
        if ids is None:
            ids = self._q[text] = np.asarray(self.vocab.ids(tokenize(text)), dtype=np.int64)
        return ids

    def piece(self, pid: str):
        got = self._pieces.get(pid)
        if got is None:
            p = self.store[pid]
            toks = tokenize_with_offsets(p.text)
            got = (np.asarray(self.vocab.ids(tokenize(p.title)), dtype=np.int64),
                   np.asarray(self.vocab.ids([t for t, _, _ in toks]), dtype=np.int64),
                   [(s, e) for _, s, e in toks])
            self._pieces[pid] = got
        return got

    def occurrences(self, pid: str, answers: Sequence[str], max_len: int = MAX_SPAN_LEN):
        """Local (start, end) token spans of ``pid`` whose text normalizes to an answer."""
        key = (pid, tuple(answers), max_len)
        got = self._occ.get(key)
        if got is None:
            targets = {normalize_answer(a) for a in answers} - {""}
            text = self.store[pid].text
            offs = self.piece(pid)[2]
            got = []
            for s in range(len(offs)):
                for e in range(s, min(len(offs), s + max_len)):
                    if normalize_answer(text[offs[s][0]:offs[e][1]]) in targets:
                        got.append((s, e))
            self._occ[key] = got
        return got


@dataclass
class JointEncoding:
    ids: np.ndarray  # L sequence ids (position 0 is CLS)
    origin: list[tuple[str, int]]  # (tag, piece index)
    offsets: list[Optional[tuple[int, int]]]  # char offsets into the piece text, evidence tokens only
    regions: list[tuple[int, int]]  # [start, end) of each evidence region
    piece_ids: tuple[str, ...]
    q_ids: np.ndarray
    qbar: np.ndarray
    X: np.ndarray  # L x 3d interaction input
    U: np.ndarray  # L x d
    cls_vec: np.ndarray

    @property
    def L(self) -> int:
        return len(self.ids)


def encode_joint(rp: ReaderParams, vocab: Vocabulary, question: Question, pieces: Sequence[str],
                 store: PassageStore, cache: Optional[ReaderCache] = None) -> JointEncoding:
    """Encode ``[CLS] question title_1 evi_1 ... title_n evi_n``."""
    if len(pieces) == 0:
        raise ValueError("chain has no pieces")
    cache = cache or ReaderCache(vocab, store)
    q_ids = cache.question(question.text)
    parts = [np.zeros(1, dtype=np.int64), q_ids]
    origin: list[tuple[str, int]] = [(CLS, -1)] + [(QUESTION, -1)] * len(q_ids)
    offsets: list[Optional[tuple[int, int]]] = [None] * (1 + len(q_ids))
    regions = []
    pos = 1 + len(q_ids)
    for i, pid in enumerate(pieces):
        t_ids, x_ids, offs = cache.piece(pid)
        parts += [t_ids, x_ids]
        origin += [(TITLE, i)] * len(t_ids) + [(EVIDENCE, i)] * len(x_ids)
        offsets += [None] * len(t_ids) + list(offs)
        pos += len(t_ids)
        regions.append((pos, pos + len(x_ids)))
        pos += len(x_ids)
    ids = np.concatenate(parts)
    d = rp.d
    qbar = rp.E[q_ids].mean(axis=0) if len(q_ids) else np.zeros(d)
    e = rp.E[ids]
    e[0] = qbar
    X = np.concatenate([e, np.broadcast_to(qbar, e.shape), e * qbar], axis=1)
    U = np.tanh(X @ rp.W_int.T)
    return JointEncoding(ids, origin, offsets, regions, tuple(pieces), q_ids, qbar, X, U, U.mean(axis=0))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x)
    return x - (m + np.log(np.sum(np.exp(x - m))))


def rerank_logits(rp: ReaderParams, encs: Sequence[JointEncoding]) -> np.ndarray:
    return np.array([enc.cls_vec @ rp.w_rank for enc in encs])


def rerank(rp: ReaderParams, vocab: Vocabulary, question: Question, chains: Sequence, store: PassageStore,
           cache: Optional[ReaderCache] = None) -> np.ndarray:
    """Probability over candidate chains that each contains the answer."""
    if len(chains) == 0:
        raise ValueError("no chains to rerank")
    encs = [encode_joint(rp, vocab, question, _pieces(c), store, cache) for c in chains]
    return _softmax(rerank_logits(rp, encs))


def span_scores(rp: ReaderParams, enc: JointEncoding) -> tuple[np.ndarray, np.ndarray]:
    return _softmax(enc.U @ rp.w_start), _softmax(enc.U @ rp.w_end)


@dataclass
class SpanPrediction:
    chain_index: int
    start: int
    end: int
    answer_text: str
    span_prob: float
    rerank_prob: float


def _pieces(chain) -> tuple[str, ...]:
    return tuple(chain.piece_ids if hasattr(chain, "piece_ids") else chain)


def best_span(enc: JointEncoding, p_start: np.ndarray, p_end: np.ndarray,
              max_len: int = MAX_SPAN_LEN) -> tuple[int, int, float]:
    """Highest P_start[s] * P_end[e] over valid spans; ties go to earlier start, then shorter."""
    best = (-1, -1, -1.0)
    for a, b in enc.regions:
        if b <= a:
            continue
        prod = np.outer(p_start[a:b], p_end[a:b])
        n = b - a
        rel = np.arange(n)[None, :] - np.arange(n)[:, None]
        prod = np.where((rel >= 0) & (rel < max_len), prod, -1.0)
        flat = int(np.argmax(prod))
        s, e = divmod(flat, n)
        if prod[s, e] > best[2]:
            best = (a + s, a + e, float(prod[s, e]))
    if best[0] < 0:
        raise ValueError("chain has no evidence tokens")
    return best


def span_text(enc: JointEncoding, store: PassageStore, start: int, end: int) -> str:
    tag, i = enc.origin[start]
    if tag != EVIDENCE or enc.origin[end] != (EVIDENCE, i):
        raise ValueError("span is not inside a single evidence region")
    text = store[enc.piece_ids[i]].text
    return text[enc.offsets[start][0]:enc.offsets[end][1]]


def predict_answer(rp: ReaderParams, vocab: Vocabulary, question: Question, chains: Sequence,
                   store: PassageStore, cache: Optional[ReaderCache] = None,
                   max_len: int = MAX_SPAN_LEN) -> SpanPrediction:
    """Best span of the top-reranked chain (ties: lower chain index)."""
    if len(chains) == 0:
        raise ValueError("no chains to read")
    encs = [encode_joint(rp, vocab, question, _pieces(c), store, cache) for c in chains]
    probs = _softmax(rerank_logits(rp, encs))
    ci = int(np.argmax(probs))
    enc = encs[ci]
    ps, pe = span_scores(rp, enc)
    s, e, p = best_span(enc, ps, pe, max_len)
    return SpanPrediction(ci, s, e, span_text(enc, store, s, e), p, float(probs[ci]))


def answer_occurrences(enc: JointEncoding, answers: Sequence[str], cache: ReaderCache,
                       max_len: int = MAX_SPAN_LEN) -> list[tuple[int, int]]:
    out = []
    for i, (a, _) in enumerate(enc.regions):
        out += [(a + s, a + e) for s, e in cache.occurrences(enc.piece_ids[i], answers, max_len)]
    return out


def _backward_encoding(rp: ReaderParams, enc: JointEncoding, dU: np.ndarray, grads: ReaderParams) -> None:
    d = rp.d
    dH = dU * (1.0 - enc.U * enc.U)
    grads.W_int += dH.T @ enc.X
    dX = dH @ rp.W_int
    e = enc.X[:, :d]
    de = dX[:, :d] + dX[:, 2 * d:] * enc.qbar
    dqbar = dX[:, d:2 * d].sum(axis=0) + (dX[:, 2 * d:] * e).sum(axis=0) + de[0]
    np.add.at(grads.E, enc.ids[1:], de[1:])
    if len(enc.q_ids):
        np.add.at(grads.E, enc.q_ids, np.broadcast_to(dqbar / len(enc.q_ids), (len(enc.q_ids), d)))


def reader_loss(rp: ReaderParams, vocab: Vocabulary, question: Question, positive, negatives: Sequence,
                answers: Sequence[str], store: PassageStore, cache: Optional[ReaderCache] = None,
                grads: Optional[ReaderParams] = None, weight: float = 1.0,
                max_len: int = MAX_SPAN_LEN) -> float:
    """Rerank NLL of the positive chain plus marginal span NLL over all answer occurrences in it.

    When ``grads`` is given, ``weight`` times the gradient is accumulated into it.
    """
    cache = cache or ReaderCache(vocab, store)
    chains = [_pieces(positive)] + [_pieces(c) for c in negatives]
    encs = [encode_joint(rp, vocab, question, c, store, cache) for c in chains]
    pos = encs[0]
    occ = answer_occurrences(pos, answers, cache, max_len)
    if not occ:
        raise ValueError(f"question {question.id!r}: positive chain holds no answer occurrence")

    logits = rerank_logits(rp, encs)
    log_p = _log_softmax(logits)
    a = pos.U @ rp.w_start
    b = pos.U @ rp.w_end
    la, lb = _log_softmax(a), _log_softmax(b)
    occ_s = np.array([s for s, _ in occ])
    occ_e = np.array([e for _, e in occ])
    joint = la[occ_s] + lb[occ_e]
    m = np.max(joint)
    J = m + np.log(np.sum(np.exp(joint - m)))
    loss = float(-log_p[0] - J)
    if not np.isfinite(loss):
        raise NumericError("non-finite reader loss")
    if grads is None:
        return loss

    dr = np.exp(log_p)
    dr[0] -= 1.0
    dr *= weight
    w_occ = np.exp(joint - J)
    gs = np.zeros(pos.L)
    ge = np.zeros(pos.L)
    np.add.at(gs, occ_s, w_occ)
    np.add.at(ge, occ_e, w_occ)
    da = (np.exp(la) - gs) * weight
    db = (np.exp(lb) - ge) * weight
    for c, enc in enumerate(encs):
        grads.w_rank += dr[c] * enc.cls_vec
        dU = np.broadcast_to(dr[c] * rp.w_rank / enc.L, enc.U.shape).copy()
        if c == 0:
            dU += np.outer(da, rp.w_start) + np.outer(db, rp.w_end)
            grads.w_start += enc.U.T @ da
            grads.w_end += enc.U.T @ db
        _backward_encoding(rp, enc, dU, grads)
    grads.E[0] = 0.0
    return loss


def reader_gradients(rp: ReaderParams, vocab: Vocabulary, batch: Sequence[tuple], store: PassageStore,
                     cache: Optional[ReaderCache] = None) -> tuple[float, ReaderParams]:
    """Mean loss and gradient over ``(question, positive, negatives, answers)`` items."""
    if not batch:
        raise ValueError("empty batch")
    cache = cache or ReaderCache(vocab, store)
    grads = rp.zeros_like()
    w = 1.0 / len(batch)
    total = 0.0
    for question, positive, negatives, answers in batch:
        total += reader_loss(rp, vocab, question, positive, negatives, answers, store, cache, grads, w)
    for name, g in grads.blocks().items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in reader block {name}")
    return total / len(batch), grads
