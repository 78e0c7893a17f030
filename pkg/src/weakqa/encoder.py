"""Bag-of-tokens dual encoder, step-wise contrastive NLL and its gradients, Adam."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .data import Passage, PassageStore, Question, Vocabulary, tokenize


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class EncoderParams:
    """Shared token embeddings ``E`` plus query / passage projections.

    Row 0 of ``E`` is the UNK row; it stays at zero and receives no gradient.
    The same container holds gradients of the same shape.
    """

    E: np.ndarray
    W_q: np.ndarray
    W_p: np.ndarray

    @property
    def d(self) -> int:
        return self.E.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(**{k: np.zeros_like(v) for k, v in self.blocks().items()})


Gradients = EncoderParams


def init_encoder(vocab_size: int, d: int, rng: np.random.Generator,
                 scale: Optional[float] = None) -> EncoderParams:
    """E ~ uniform(-scale, scale) with scale defaulting to 0.5/d; UNK row zero; identity projections."""
    a = 0.5 / d if scale is None else scale
    E = rng.uniform(-a, a, size=(vocab_size, d))
    E[0] = 0.0
    return EncoderParams(E=E, W_q=np.eye(d), W_p=np.eye(d))


def _check_dims(params: EncoderParams, vocab: Vocabulary) -> None:
    d = params.d
    if params.E.shape[0] != len(vocab) or params.W_q.shape != (d, d) or params.W_p.shape != (d, d):
        raise ValueError(f"encoder shapes {params.E.shape}, {params.W_q.shape}, {params.W_p.shape} "
                         f"do not match vocabulary size {len(vocab)}")


def passage_tokens(passage: Passage) -> list[str]:
    return tokenize(passage.title) + tokenize(passage.text)


def encode_ids(E: np.ndarray, W: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    if len(ids) == 0:
        return np.zeros(W.shape[0])
    return W @ E[np.asarray(ids, dtype=np.int64)].mean(axis=0)


def encode_passage(params: EncoderParams, vocab: Vocabulary, passage: Passage) -> np.ndarray:
    _check_dims(params, vocab)
    return encode_ids(params.E, params.W_p, vocab.ids(passage_tokens(passage)))


def encode_query(params: EncoderParams, vocab: Vocabulary, query_text: str) -> np.ndarray:
    _check_dims(params, vocab)
    return encode_ids(params.E, params.W_q, vocab.ids(tokenize(query_text)))


def similarity(qv: np.ndarray, pv: np.ndarray) -> float:
    if qv.shape != pv.shape:
        raise ValueError(f"dimension mismatch: {qv.shape} vs {pv.shape}")
    return float(np.dot(qv, pv))


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def _step_query_text(question: Question, store: PassageStore, prefix: Sequence[str]) -> str:
    parts = [question.text]
    for pid in prefix:
        p = store[pid]
        parts.append(p.title)
        parts.append(p.text)
    return " ".join(parts)


def _chain_ids(chain) -> tuple[str, ...]:
    return tuple(chain.piece_ids if hasattr(chain, "piece_ids") else chain)


def nll_loss(params: EncoderParams, vocab: Vocabulary, question: Question, positive,
             negatives: Sequence, store: PassageStore) -> float:
    """Sum over hops of -log softmax of the positive step score against negative step scores.

    Each negative chain scores hop t with its own prefix; chains shorter than the
    positive only contribute to the hops they cover.
    """
    pos = _chain_ids(positive)
    if not pos:
        raise ValueError("positive chain is empty")
    negs = [_chain_ids(c) for c in negatives]
    cache: dict[tuple[str, ...], np.ndarray] = {}

    def score(chain: tuple[str, ...], t: int) -> float:
        key = chain[:t]
        if key not in cache:
            cache[key] = encode_query(params, vocab, _step_query_text(question, store, key))
        return similarity(cache[key], encode_passage(params, vocab, store[chain[t]]))

    total = 0.0
    for t in range(len(pos)):
        s_pos = score(pos, t)
        scores = [s_pos] + [score(c, t) for c in negs if len(c) > t]
        total += _logsumexp(np.asarray(scores)) - s_pos
    return total


class BagCache:
    """Memoised vocabulary ids for passages and question texts."""

    def __init__(self, vocab: Vocabulary, store: PassageStore):
        self.vocab = vocab
        self.store = store
        self._pass: dict[str, np.ndarray] = {}
        self._text: dict[str, np.ndarray] = {}

    def passage(self, pid: str) -> np.ndarray:
        ids = self._pass.get(pid)
        if ids is None:
            ids = np.asarray(self.vocab.ids(passage_tokens(self.store[pid])), dtype=np.int64)
            self._pass[pid] = ids
        return ids

    def text(self, text: str) -> np.ndarray:
        ids = self._text.get(text)
        if ids is None:
            ids = np.asarray(self.vocab.ids(tokenize(text)), dtype=np.int64)
            self._text[text] = ids
        return ids


def _bag_matrix(rows: list[np.ndarray], vocab_size: int) -> sp.csr_matrix:
    """Sparse row-normalised bag-of-ids matrix (each row is a token mean operator)."""
    lengths = np.fromiter((len(r) for r in rows), dtype=np.int64, count=len(rows))
    indptr = np.concatenate([[0], np.cumsum(lengths)])
    indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    with np.errstate(divide="ignore"):
        w = np.where(lengths > 0, 1.0 / np.maximum(lengths, 1), 0.0)
    data = np.repeat(w, lengths)
    m = sp.csr_matrix((data, indices, indptr), shape=(len(rows), vocab_size))
    m.sum_duplicates()
    return m


def nll_gradients(params: EncoderParams, vocab: Vocabulary, batch: Sequence[tuple], store: PassageStore,
                  in_batch_negatives: bool = False, cache: Optional[BagCache] = None
                  ) -> tuple[float, Gradients]:
    """Mean batch NLL and its analytic gradient.

    ``batch`` holds ``(question, positive_chain, negative_chains)`` triples. Mined
    negatives score each step under their own prefix. With ``in_batch_negatives``
    every piece of the other examples' positives is an extra candidate at every step,
    scored under this example's positive prefix (pieces already in its positive up to
    step t are skipped).
    """
    if not batch:
        raise ValueError("empty batch")
    _check_dims(params, vocab)
    for name, block in params.blocks().items():
        if not np.all(np.isfinite(block)):
            raise NumericError(f"non-finite encoder parameters in block {name}")
    cache = cache or BagCache(vocab, store)
    V = params.E.shape[0]

    q_rows: list[np.ndarray] = []
    q_key: dict[tuple, int] = {}
    p_index: dict[str, int] = {}
    term_q: list[int] = []
    term_p: list[int] = []
    term_pos: list[bool] = []
    group_starts: list[int] = []
    positives = [_chain_ids(b[1]) for b in batch]
    pool: list[list[str]] = [[] for _ in batch]
    if in_batch_negatives:
        # every piece of every other positive, first occurrence order, deduplicated
        for i in range(len(batch)):
            seen: set[str] = set()
            for j, other in enumerate(positives):
                if j == i:
                    continue
                for pid in other:
                    if pid not in seen:
                        seen.add(pid)
                        pool[i].append(pid)

    for i, (question, _, negatives) in enumerate(batch):
        pos = positives[i]
        if not pos:
            raise ValueError(f"question {question.id!r}: empty positive chain")
        negs = [_chain_ids(c) for c in negatives]
        qids = cache.text(question.text)
        for t in range(len(pos)):
            group_starts.append(len(term_q))
            terms = [(pos[:t], pos[t], True)] + [(c[:t], c[t], False) for c in negs if len(c) > t]
            if in_batch_negatives:
                terms += [(pos[:t], pid, False) for pid in pool[i] if pid not in pos[:t + 1]]
            for prefix, pid, is_pos in terms:
                key = (i, prefix)
                qi = q_key.get(key)
                if qi is None:
                    qi = len(q_rows)
                    q_key[key] = qi
                    q_rows.append(np.concatenate([qids] + [cache.passage(p) for p in prefix]))
                pi = p_index.get(pid)
                if pi is None:
                    pi = p_index[pid] = len(p_index)
                term_q.append(qi)
                term_p.append(pi)
                term_pos.append(is_pos)

    Qm = _bag_matrix(q_rows, V)
    Pm = _bag_matrix([cache.passage(pid) for pid in p_index], V)
    tq = np.asarray(term_q)
    tp = np.asarray(term_p)
    is_pos = np.asarray(term_pos)
    starts = np.asarray(group_starts)

    A = Qm @ params.E
    Bp = Pm @ params.E
    qv = A @ params.W_q.T
    pv = Bp @ params.W_p.T
    s = np.einsum("ij,ij->i", qv[tq], pv[tp])

    group = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(s))))
    m = np.maximum.reduceat(s, starts)
    e = np.exp(s - m[group])
    Z = np.add.reduceat(e, starts)
    loss = float(np.sum(np.log(Z) + m) - np.sum(s[is_pos])) / len(batch)
    if not np.isfinite(loss):
        raise NumericError("non-finite encoder loss")

    ds = (e / Z[group] - is_pos) / len(batch)
    # scatter term gradients back to unique queries / passages
    to_q = sp.csr_matrix((ds, (tq, np.arange(len(s)))), shape=(len(q_rows), len(s)))
    to_p = sp.csr_matrix((ds, (tp, np.arange(len(s)))), shape=(len(p_index), len(s)))
    dqv = to_q @ pv[tp]
    dpv = to_p @ qv[tq]

    grads = Gradients(
        E=np.asarray(Qm.T @ (dqv @ params.W_q) + Pm.T @ (dpv @ params.W_p)),
        W_q=dqv.T @ A,
        W_p=dpv.T @ Bp,
    )
    grads.E[0] = 0.0
    for name, g in grads.blocks().items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in encoder block {name}")
    return loss, grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> "OptState":
        return replace(self, m={k: a.copy() for k, a in self.m.items()},
                       v={k: a.copy() for k, a in self.v.items()})


def init_opt_state(params, lr: float = 1e-3) -> OptState:
    blocks = params.blocks()
    return OptState(m={k: np.zeros_like(a) for k, a in blocks.items()},
                    v={k: np.zeros_like(a) for k, a in blocks.items()}, lr=lr)


def opt_step(params, grads, state: OptState):
    """One bias-corrected Adam update; returns fresh ``(params, state)``."""
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    gblocks = grads.blocks()
    for name, p in params.blocks().items():
        g = gblocks[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return type(params)(**new_p), replace(state, m=new_m, v=new_v, step=t)
