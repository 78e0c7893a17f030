"""Multi-hop evidence retrieval: per-hop query composition and beam search."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Passage, PassageStore, Question, Vocabulary
from .encoder import BagCache, EncoderParams, encode_ids
from .index import (DenseIndex, LexicalIndex, dense_search_batch, lexical_scores, params_fingerprint,
                    _top_rows)


class StaleIndexError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvidenceChain:
    piece_ids: tuple[str, ...]
    step_scores: tuple[float, ...]
    chain_score: float

    def __len__(self) -> int:
        return len(self.piece_ids)

    def to_json(self) -> dict:
        return {"pieces": list(self.piece_ids), "step_scores": list(self.step_scores),
                "chain_score": self.chain_score}

    @classmethod
    def from_json(cls, obj: dict) -> "EvidenceChain":
        return cls(tuple(obj["pieces"]), tuple(float(s) for s in obj.get("step_scores", ())),
                   float(obj.get("chain_score", 0.0)))


@dataclass
class RetrievalConfig:
    n_hops: int = 2
    beam_width: int = 10
    top_k: int = 10
    score_combine: str = "sum"  # or "product"

    def __post_init__(self):
        if self.n_hops < 1:
            raise ValueError("n_hops must be >= 1")
        if self.score_combine not in ("sum", "product"):
            raise ValueError(f"unknown score_combine {self.score_combine!r}")


def compose_query(question: Question, pieces: Sequence[Passage]) -> str:
    parts = [question.text]
    for p in pieces:
        parts.append(p.title)
        parts.append(p.text)
    return " ".join(parts)


def _combine(scores: Sequence[float], how: str) -> float:
    if how == "product":
        return math.prod(scores)
    total = 0.0
    for s in scores:
        total += s
    return total


SearchFn = Callable[[list[tuple[str, ...]], int], list[list[tuple[str, float]]]]


def beam_search(search: SearchFn, store: PassageStore, cfg: RetrievalConfig) -> list[EvidenceChain]:
    """Generic beam over chains; ``search(prefixes, k)`` returns ranked (pid, score) lists."""
    if len(store) < cfg.n_hops:
        raise ValueError(f"store has {len(store)} passages, fewer than {cfg.n_hops} hops")
    width = max(cfg.beam_width, cfg.top_k)
    beams: list[tuple[tuple[str, ...], tuple[float, ...]]] = [((), ())]
    for _ in range(cfg.n_hops):
        prefixes = [b[0] for b in beams]
        results = search(prefixes, width + len(prefixes[0]))
        cands = []
        for (pieces, steps), hits in zip(beams, results):
            taken = 0
            for pid, score in hits:
                if pid in pieces:
                    continue
                new_steps = steps + (score,)
                cands.append((_combine(new_steps, cfg.score_combine), pieces + (pid,), new_steps))
                taken += 1
                if taken == width:
                    break
        cands.sort(key=lambda c: (-c[0], c[1]))
        beams = [(c[1], c[2]) for c in cands[:width]]
    return [EvidenceChain(p, s, _combine(s, cfg.score_combine)) for p, s in beams[: cfg.top_k]]


def beam_search_retrieve(index: DenseIndex, params: EncoderParams, vocab: Vocabulary, store: PassageStore,
                         question: Question, cfg: RetrievalConfig,
                         cache: Optional[BagCache] = None, check: bool = True) -> list[EvidenceChain]:
    """Top-k chains under the dense retriever; every hop re-encodes ``[q; z_1..z_{t-1}]``."""
    if check and index.fingerprint and index.fingerprint != params_fingerprint(params):
        raise StaleIndexError("dense index was built from different encoder parameters")
    cache = cache or BagCache(vocab, store)
    qids = cache.text(question.text)

    def search(prefixes, k):
        Q = np.stack([encode_ids(params.E, params.W_q,
                                 np.concatenate([qids] + [cache.passage(p) for p in pre]))
                      for pre in prefixes])
        return dense_search_batch(index, Q, k)

    return beam_search(search, store, cfg)


def lexical_beam_retrieve(lex: LexicalIndex, store: PassageStore, question: Question,
                          cfg: RetrievalConfig) -> list[EvidenceChain]:
    """TF-IDF analogue of the dense beam, used as the unsupervised baseline."""

    def search(prefixes, k):
        out = []
        for pre in prefixes:
            s = lexical_scores(lex, compose_query(question, [store[p] for p in pre]))
            out.append([(lex.ids[i], float(s[i])) for i in _top_rows(s, k)])
        return out

    return beam_search(search, store, cfg)
