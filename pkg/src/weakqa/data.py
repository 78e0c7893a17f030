"""Corpus and question records, tokenization, JSONL I/O and the synthetic world."""
from __future__ import annotations

import json
import os
import random
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def tokenize(text: str) -> list[str]:
    return [m.group(0).lower() for m in _TOKEN_RE.finditer(text)]


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Tokens with their [start, end) character offsets into ``text``."""
    return [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    text: str

    def to_json(self) -> dict:
        return {"id": self.id, "title": self.title, "text": self.text}


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    answers: tuple[str, ...]
    gold_chain: Optional[tuple[str, ...]] = None

    def to_json(self) -> dict:
        out = {"id": self.id, "question": self.text, "answers": list(self.answers)}
        if self.gold_chain is not None:
            out["gold_chain"] = list(self.gold_chain)
        return out

    def without_gold(self) -> "Question":
        return Question(self.id, self.text, self.answers, None)


class PassageStore:
    """Passages keyed by id; iteration is always in ascending id order."""

    def __init__(self, passages: Iterable[Passage] = ()):
        self._by_id: dict[str, Passage] = {}
        for p in passages:
            self.add(p)
        self._ids: Optional[list[str]] = None

    def add(self, passage: Passage) -> None:
        if not passage.id:
            raise DataError("passage id must be nonempty")
        if passage.id in self._by_id:
            raise DataError(f"duplicate passage id {passage.id!r}")
        self._by_id[passage.id] = passage
        self._ids = None

    @property
    def ids(self) -> list[str]:
        if self._ids is None:
            self._ids = sorted(self._by_id)
        return self._ids

    def __getitem__(self, pid: str) -> Passage:
        return self._by_id[pid]

    def __contains__(self, pid: object) -> bool:
        return pid in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[Passage]:
        return (self._by_id[i] for i in self.ids)


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    UNK = 0

    def __post_init__(self):
        # id 0 is UNK, known tokens start at 1
        self.index = {t: i + 1 for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + 1

    def id(self, token: str) -> int:
        return self.index.get(token, self.UNK)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        get = self.index.get
        return [get(t, 0) for t in tokens]


def build_vocab(passages: Iterable[Passage], questions: Iterable[Question]) -> Vocabulary:
    seen: set[str] = set()
    for p in passages:
        seen.update(tokenize(p.title))
        seen.update(tokenize(p.text))
    for q in questions:
        seen.update(tokenize(q.text))
    return Vocabulary(sorted(seen))


# ---------------------------------------------------------------------------
# JSONL I/O


def _atomic_write_lines(path: Path, lines: Iterable[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path, records: Iterable[dict]) -> None:
    _atomic_write_lines(Path(path), (json.dumps(r, ensure_ascii=False) for r in records))


def read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _require_str(obj: dict, key: str, where: str) -> str:
    if key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    val = obj[key]
    if not isinstance(val, str):
        raise DataError(f"{where}: field {key!r} must be a string")
    return val


def load_passages(path) -> PassageStore:
    store = PassageStore()
    for lineno, obj in read_jsonl(path):
        where = f"{path}:{lineno}"
        pid = _require_str(obj, "id", where)
        title = _require_str(obj, "title", where)
        text = _require_str(obj, "text", where)
        if not pid:
            raise DataError(f"{where}: empty passage id")
        if not text:
            raise DataError(f"{where}: empty passage text")
        if pid in store:
            raise DataError(f"{where}: duplicate passage id {pid!r}")
        store.add(Passage(pid, title, text))
    return store


def load_questions(path) -> list[Question]:
    out: list[Question] = []
    seen: set[str] = set()
    for lineno, obj in read_jsonl(path):
        where = f"{path}:{lineno}"
        qid = _require_str(obj, "id", where)
        text = _require_str(obj, "question", where)
        if "answers" not in obj:
            raise DataError(f"{where}: missing field 'answers'")
        answers = obj["answers"]
        if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
            raise DataError(f"{where}: 'answers' must be a list of strings")
        if not answers:
            raise DataError(f"{where}: question {qid!r} has no answers")
        gold = obj.get("gold_chain")
        if gold is not None:
            if not isinstance(gold, list) or not all(isinstance(g, str) for g in gold):
                raise DataError(f"{where}: 'gold_chain' must be a list of strings")
            gold = tuple(gold)
        if qid in seen:
            raise DataError(f"{where}: duplicate question id {qid!r}")
        seen.add(qid)
        out.append(Question(qid, text, tuple(answers), gold))
    return out


def save_passages(path, store: PassageStore) -> None:
    write_jsonl(path, (p.to_json() for p in store))


def save_questions(path, questions: Iterable[Question]) -> None:
    write_jsonl(path, (q.to_json() for q in questions))


def check_gold_chains(questions: Iterable[Question], store: PassageStore, hops: Optional[int] = None) -> None:
    for q in questions:
        if q.gold_chain is None:
            continue
        if hops is not None and len(q.gold_chain) != hops:
            raise DataError(f"question {q.id!r}: gold chain length {len(q.gold_chain)} != {hops}")
        for pid in q.gold_chain:
            if pid not in store:
                raise DataError(f"question {q.id!r}: gold passage {pid!r} not in corpus")


# ---------------------------------------------------------------------------
# Synthetic world
#
# Institutions own a chunked "article": one chunk per relation (the only chunk
# holding that relation's answer), distractor chunks that repeat one answer
# among two never-correct decoys, and filler chunks. Distractors are usually
# filed under another institution's article (off_article_share), which keeps
# them off the gold chain's neighbourhood.
# Every chunk is titled with the institution name, so lexical overlap with the
# institution name cannot tell the chunks apart. Person passages link a person
# to their employer and act as the bridge hop for two-hop questions.


@dataclass
class GenConfig:
    num_passages: int = 2000
    num_train: int = 300
    num_dev: int = 100
    hops: int = 2
    distractor_fraction: float = 0.2
    num_institutions: int = 100
    num_persons: int = 100
    num_relations: int = 7
    roster_share: float = 0.0
    off_article_share: float = 1.0
    collaborators: int = 0
    seed: int = 42

    def validate(self) -> None:
        if self.hops not in (1, 2):
            raise ValueError("synthetic worlds support hops of 1 or 2")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ValueError("distractor_fraction must lie in [0, 1]")
        if not 1 <= self.num_relations <= len(RELATIONS):
            raise ValueError(f"num_relations must be in [1, {len(RELATIONS)}]")
        if min(self.num_passages, self.num_institutions, self.num_persons) < 1:
            raise ValueError("num_passages, num_institutions and num_persons must be positive")
        if self.num_train < 0 or self.num_dev < 0:
            raise ValueError("question counts must be non-negative")
        if not 0.0 <= self.roster_share <= 1.0:
            raise ValueError("roster_share must lie in [0, 1]")
        if not 0.0 <= self.off_article_share <= 1.0:
            raise ValueError("off_article_share must lie in [0, 1]")


@dataclass(frozen=True)
class _Relation:
    name: str
    kind: str  # answer pool
    chunk: str  # relation chunk template: {inst}, {ans}
    decoy: str  # distractor template: {inst}, {a}, {b}, {c}
    question: str  # {x} is the institution phrase


RELATIONS = (
    _Relation("location", "place",
              "{inst} is situated in {ans} and welcomes visitors every spring.",
              "The {inst} choir once toured {a}, {b} and {c} during a long summer.",
              "Where is {x} based?"),
    _Relation("founder", "founder",
              "{inst} was established by {ans} after a long campaign.",
              "A portrait gallery inside {inst} honours {a}, {b} and {c} among others.",
              "Who founded {x}?"),
    _Relation("mascot", "animal",
              "Athletes of {inst} compete under the emblem of the {ans}.",
              "Children visiting {inst} drew the {a}, the {b} and the {c} on a mural.",
              "Which creature represents {x}?"),
    _Relation("color", "color",
              "The ceremonial banner of {inst} is dyed {ans} for every graduation.",
              "Guests touring {inst} often wear {a}, {b} or {c} scarves in winter.",
              "What hue symbolizes {x}?"),
    _Relation("journal", "journal",
              "Every month {inst} prints a bulletin titled {ans} for its members.",
              "The reading room of {inst} stocks {a}, {b} and {c} on low shelves.",
              "What periodical does {x} publish?"),
    _Relation("leader", "leader",
              "Today {inst} is directed by {ans} together with a small council.",
              "Paintings of {a}, {b} and {c} hang in the main hall of {inst}.",
              "Who heads {x}?"),
    _Relation("year", "year",
              "The first lectures at {inst} took place in {ans} in a rented barn.",
              "Repairs to the roof of {inst} were made in {a}, {b} and {c} by volunteers.",
              "When did {x} open?"),
)

_FILLER = (
    "{inst} maintains a quiet garden beside the old library and a pond.",
    "Students at {inst} may borrow bicycles from the porter near the gate.",
    "The dining hall of {inst} serves soup on cold evenings.",
    "A clock tower rises above the northern courtyard of {inst}.",
    "{inst} organises a lantern festival when the autumn term ends.",
    "Several greenhouses behind {inst} grow herbs for the kitchen.",
    "The archive of {inst} keeps letters written by early students.",
    "Exams at {inst} are held in a vaulted room with tall windows.",
    "{inst} runs an evening course on pottery and weaving for neighbours.",
    "A narrow bridge connects the two halves of the {inst} campus.",
)

_PERSON = (
    "{name} works at {inst}. Colleagues often mention {c}.",
    "{name} works at {inst} and shares an office corridor with {c}.",
)

_PERSON_ALONE = "{name} works at {inst}. {inst} lists {name} among its staff."

_ROSTER = "{names} met at {inst} for the {event}."
_EVENTS = ("winter symposium", "spring workshop", "charity gala", "reading circle",
           "summer school", "robotics fair", "debating contest", "film evening")

_SYLLABLES = ("ba", "be", "bo", "da", "de", "do", "fa", "fe", "ga", "go", "ka", "ke",
              "ko", "la", "le", "lo", "ma", "me", "mo", "na", "ne", "no", "pa", "pe",
              "ra", "re", "ro", "sa", "se", "so", "ta", "te", "to", "va", "ve", "vo",
              "za", "zo", "ri", "li", "ni", "mi", "tu", "ru", "lu", "nu")
_CODAS = ("", "n", "r", "l", "s", "th", "x", "m")
_INST_KINDS = ("University", "Institute", "College", "Academy", "Polytechnic")


class _Words:
    """Unique capitalised pseudo-words drawn from a seeded RNG."""

    def __init__(self, rng: random.Random, reserved: set[str]):
        self.rng = rng
        self.used = set(reserved)

    def make(self, syllables: int = 3) -> str:
        for _ in range(10_000):
            w = "".join(self.rng.choice(_SYLLABLES) for _ in range(syllables)) + self.rng.choice(_CODAS)
            if w not in self.used:
                self.used.add(w)
                return w.capitalize()
        raise ValueError("pseudo-word space exhausted; reduce world size")

    def many(self, n: int, syllables: int = 3) -> list[str]:
        return [self.make(syllables) for _ in range(n)]


def _template_words() -> set[str]:
    words: set[str] = set()
    for r in RELATIONS:
        for t in (r.chunk, r.decoy, r.question):
            words.update(tokenize(t))
    for t in _FILLER + _PERSON + (_PERSON_ALONE, _ROSTER) + _EVENTS + _INST_KINDS:
        words.update(tokenize(t))
    words.update({"the", "employer", "of", "review", "port", "new"})
    return words


def _join_names(names: Sequence[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _answer_pool(words: _Words, kind: str, n: int, rng: random.Random) -> list[str]:
    if kind == "place":
        out = []
        for _ in range(n):
            w = words.make(3)
            out.append(f"Port {w}" if rng.random() < 0.25 else w)
        return out
    if kind in ("founder", "leader"):
        return [f"{words.make(2)} {words.make(3)}" for _ in range(n)]
    if kind == "journal":
        return [f"{words.make(3)} Review" for _ in range(n)]
    if kind == "year":
        return [str(y) for y in rng.sample(range(1600, 1990), n)]
    return words.many(n, 3)


def generate_synthetic(config: GenConfig) -> tuple[PassageStore, list[Question], list[Question]]:
    """Build a seeded entity-relation world with gold chains and distractors."""
    config.validate()
    rng = random.Random(config.seed)
    words = _Words(rng, _template_words())
    relations = RELATIONS[: config.num_relations]
    n_inst, n_pers = config.num_institutions, config.num_persons
    n_q = config.num_train + config.num_dev

    if config.hops == 1:
        n_pairs = n_inst * len(relations)
    else:
        n_pairs = n_pers * len(relations)
    if n_q > n_pairs:
        raise ValueError(f"world too small: {n_q} questions requested but only {n_pairs} "
                         "distinct (entity, relation) pairs exist")
    if n_inst < 3:
        raise ValueError("world too small: need at least 3 institutions for distractors")
    n_distract = round(config.distractor_fraction * config.num_passages)
    fixed = n_pers + n_inst * len(relations) + n_distract
    if fixed > config.num_passages:
        raise ValueError(f"world too small: {fixed} passages needed before filler, "
                         f"num_passages={config.num_passages}")

    institutions = [f"{w} {rng.choice(_INST_KINDS)}" for w in words.many(n_inst, 3)]
    answers: dict[str, list[str]] = {}
    for rel in relations:
        if rel.kind == "place":
            # places are shared so several institutions sit in the same town
            pool = _answer_pool(words, "place", max(3, n_inst // 2), rng)
            answers[rel.name] = [pool[i % len(pool)] for i in range(n_inst)]
            rng.shuffle(answers[rel.name])
        else:
            answers[rel.name] = _answer_pool(words, rel.kind, n_inst, rng)

    persons = [f"{words.make(2)} {words.make(3)}" for _ in range(n_pers)]
    employer = [rng.randrange(n_inst) for _ in range(n_pers)]

    # (kind, payload, title, text)
    records: list[tuple[str, tuple, str, str]] = []
    for pi, name in enumerate(persons):
        others = [j for j in rng.sample(range(n_pers), min(n_pers, config.collaborators + 1)) if j != pi]
        others = others[: config.collaborators]
        if others:
            text = rng.choice(_PERSON).format(name=name, inst=institutions[employer[pi]],
                                              c=_join_names([persons[j] for j in others]))
        else:
            text = _PERSON_ALONE.format(name=name, inst=institutions[employer[pi]])
        records.append(("person", (pi,), name, text))
    for ii, inst in enumerate(institutions):
        for rel in relations:
            text = rel.chunk.format(inst=inst, ans=answers[rel.name][ii])
            records.append(("relation", (ii, rel.name), inst, text))
    if config.hops == 1:
        pairs = [(ii, rel.name) for ii in range(n_inst) for rel in relations]
    else:
        pairs = [(pi, rel.name) for pi in range(n_pers) for rel in relations]
    chosen = rng.sample(pairs, n_q)
    asked = sorted({(ent if config.hops == 1 else employer[ent], rname) for ent, rname in chosen})
    rel_by_name = {r.name: r for r in relations}
    # decoys never answer any question; the true answer is the only one an answer filter can match
    decoy_pool = {}
    for rel in relations:
        taken = set(answers[rel.name])
        pool = [a for a in _answer_pool(words, rel.kind, 3 * n_inst, rng) if a not in taken]
        decoy_pool[rel.name] = sorted(set(pool))
    for k in range(n_distract):
        if asked:
            ii, rname = asked[k % len(asked)] if k < len(asked) else asked[rng.randrange(len(asked))]
            rel = rel_by_name[rname]
        else:
            ii, rel = rng.randrange(n_inst), relations[rng.randrange(len(relations))]
        true = answers[rel.name][ii]
        picks = rng.sample(decoy_pool[rel.name], 2) + [true]
        rng.shuffle(picks)
        host = ii
        share = config.off_article_share
        if n_inst > 1 and (share >= 1.0 or (share > 0.0 and rng.random() < share)):
            host = (ii + 1 + rng.randrange(n_inst - 1)) % n_inst
        text = rel.decoy.format(inst=institutions[host], a=picks[0], b=picks[1], c=picks[2])
        records.append(("distractor", (host, rel.name), institutions[host], text))
    n_rest = config.num_passages - len(records)
    n_roster = int(round(config.roster_share * n_rest))
    for k in range(n_rest - n_roster):
        ii = k % n_inst
        text = rng.choice(_FILLER).format(inst=institutions[ii])
        records.append(("filler", (ii,), institutions[ii], text))
    for _ in range(n_roster):
        names = [persons[j] for j in rng.sample(range(n_pers), min(n_pers, 5))]
        event = rng.choice(_EVENTS)
        year = rng.randrange(1990, 2024)
        text = _ROSTER.format(names=_join_names(names), inst=institutions[rng.randrange(n_inst)], event=event)
        records.append(("roster", (), f"{event.title()} {year}", text))

    order = list(range(len(records)))
    rng.shuffle(order)
    width = len(str(len(records)))
    pid_of: dict[int, str] = {}
    passages = []
    for new_pos, old in enumerate(order):
        pid = f"p{new_pos:0{width}d}"
        pid_of[old] = pid
        _, _, title, text = records[old]
        passages.append(Passage(pid, title, text))
    store = PassageStore(passages)

    person_pid = {records[i][1][0]: pid_of[i] for i in range(len(records)) if records[i][0] == "person"}
    rel_pid = {records[i][1]: pid_of[i] for i in range(len(records)) if records[i][0] == "relation"}

    questions = []
    for qi, (ent, rname) in enumerate(chosen):
        rel = rel_by_name[rname]
        if config.hops == 1:
            ii = ent
            text = rel.question.format(x=institutions[ii])
            gold = (rel_pid[(ii, rname)],)
        else:
            ii = employer[ent]
            text = rel.question.format(x=f"the employer of {persons[ent]}")
            gold = (person_pid[ent], rel_pid[(ii, rname)])
        questions.append(Question(f"q{qi:05d}", text, (answers[rname][ii],), gold))
    train = questions[: config.num_train]
    dev = questions[config.num_train:]
    return store, train, dev


def answer_bearing_off_chain(store: PassageStore, questions: Sequence[Question]) -> set[str]:
    """Passages holding some question's answer tokens while off that question's gold chain."""
    from .metrics import contains_answer

    hits: set[str] = set()
    for p in store:
        for q in questions:
            if q.gold_chain is not None and p.id in q.gold_chain:
                continue
            if contains_answer(p.text, q.answers[:1]):
                hits.add(p.id)
                break
    return hits
