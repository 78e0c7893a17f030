"""Answer normalization and retrieval / reader evaluation metrics."""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Optional, Sequence

SCHEMA_VERSION = 1

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


@lru_cache(maxsize=200_000)
def _norm_tokens(text: str) -> tuple[str, ...]:
    return tuple(normalize_answer(text).split())


def _contains_seq(hay: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0 or n > len(hay):
        return False
    first = needle[0]
    for i in range(len(hay) - n + 1):
        if hay[i] == first and tuple(hay[i:i + n]) == tuple(needle):
            return True
    return False


def contains_answer(text: str, answers: Iterable[str]) -> bool:
    """True iff some normalized answer is a contiguous token run of the normalized text."""
    hay = _norm_tokens(text)
    return any(_contains_seq(hay, _norm_tokens(a)) for a in answers)


def _pieces(chain) -> Sequence[str]:
    return chain.piece_ids if hasattr(chain, "piece_ids") else chain


def answer_hit(chains: Sequence, answers: Sequence[str], store) -> bool:
    return any(contains_answer(store[pid].text, answers) for c in chains for pid in _pieces(c))


def passage_hit(chains: Sequence, gold: Sequence[str]) -> bool:
    got = {pid for c in chains for pid in _pieces(c)}
    return any(g in got for g in gold)


def chain_hit(chains: Sequence, gold: Sequence[str], single_chain: bool = False) -> bool:
    if single_chain:
        return any(set(gold) <= set(_pieces(c)) for c in chains)
    got = {pid for c in chains for pid in _pieces(c)}
    return all(g in got for g in gold)


def answer_recall(retrievals: Mapping[str, Sequence], questions: Sequence, store) -> float:
    if not questions:
        return 0.0
    hits = sum(answer_hit(retrievals.get(q.id, ()), q.answers, store) for q in questions)
    return hits / len(questions)


def _with_gold(questions):
    return [q for q in questions if q.gold_chain]


def passage_recall(retrievals: Mapping[str, Sequence], questions: Sequence) -> float:
    qs = _with_gold(questions)
    if not qs:
        return 0.0
    return sum(passage_hit(retrievals.get(q.id, ()), q.gold_chain) for q in qs) / len(qs)


def chain_recall(retrievals: Mapping[str, Sequence], questions: Sequence, single_chain: bool = False) -> float:
    qs = _with_gold(questions)
    if not qs:
        return 0.0
    return sum(chain_hit(retrievals.get(q.id, ()), q.gold_chain, single_chain) for q in qs) / len(qs)


def exact_match(prediction: str, answers: Iterable[str]) -> bool:
    pred = normalize_answer(prediction)
    return any(pred == normalize_answer(a) for a in answers)


def exact_match_score(predictions: Mapping[str, str], questions: Sequence) -> float:
    if not questions:
        return 0.0
    return sum(exact_match(predictions.get(q.id, ""), q.answers) for q in questions) / len(questions)


@dataclass
class MetricsReport:
    k: int
    answer_recall: Optional[float] = None
    passage_recall: Optional[float] = None
    chain_recall: Optional[float] = None
    exact_match: Optional[float] = None
    num_questions: int = 0
    num_without_gold: int = 0
    per_question: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "k": self.k,
            "answer_recall": self.answer_recall,
            "passage_recall": self.passage_recall,
            "chain_recall": self.chain_recall,
            "exact_match": self.exact_match,
            "num_questions": self.num_questions,
            "num_without_gold": self.num_without_gold,
            "per_question": self.per_question,
        }


def evaluate(questions: Sequence, store=None, retrievals: Optional[Mapping[str, Sequence]] = None,
             predictions: Optional[Mapping[str, str]] = None, k: int = 10,
             single_chain: bool = False) -> MetricsReport:
    """Build a report from top-``k`` retrieved chains and/or predicted answers."""
    report = MetricsReport(k=k, num_questions=len(questions),
                           num_without_gold=sum(1 for q in questions if not q.gold_chain))
    rows = {q.id: {"question_id": q.id} for q in questions}
    if retrievals is not None:
        top = {qid: list(chains)[:k] for qid, chains in retrievals.items()}
        if store is None:
            raise ValueError("answer recall needs the passage store")
        report.answer_recall = answer_recall(top, questions, store)
        report.passage_recall = passage_recall(top, questions)
        report.chain_recall = chain_recall(top, questions, single_chain)
        for q in questions:
            chains = top.get(q.id, ())
            row = rows[q.id]
            row["answer_hit"] = answer_hit(chains, q.answers, store)
            if q.gold_chain:
                row["passage_hit"] = passage_hit(chains, q.gold_chain)
                row["chain_hit"] = chain_hit(chains, q.gold_chain, single_chain)
    if predictions is not None:
        report.exact_match = exact_match_score(predictions, questions)
        for q in questions:
            rows[q.id]["exact_match"] = exact_match(predictions.get(q.id, ""), q.answers)
    report.per_question = [rows[q.id] for q in questions]
    return report
