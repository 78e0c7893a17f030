import numpy as np
import pytest

from weakqa.data import GenConfig, Passage, PassageStore, Question, build_vocab, generate_synthetic


# acceptance lines by criterion number, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}

TINY_GEN = dict(num_passages=90, num_train=24, num_dev=10, num_institutions=12, num_persons=12,
                num_relations=3, distractor_fraction=0.1, seed=7)


def make_toy_store() -> PassageStore:
    return PassageStore([
        Passage("p0", "Rutgers University", "Rutgers University is located in New Brunswick."),
        Passage("p1", "Alan Smith", "Alan Smith works at Rutgers University."),
        Passage("p2", "Yale", "Yale is located in New Haven."),
        Passage("p3", "Bob Jones", "Bob Jones works at Yale."),
        Passage("p4", "Choir", "The choir toured New Brunswick and New Haven."),
        Passage("p5", "Filler", "Nothing to see here."),
    ])


def make_toy_questions() -> list[Question]:
    return [
        Question("q0", "Where is the employer of Alan Smith located?", ("New Brunswick",), ("p1", "p0")),
        Question("q1", "Where is the employer of Bob Jones located?", ("New Haven",), ("p3", "p2")),
    ]


@pytest.fixture
def toy_store():
    return make_toy_store()


@pytest.fixture
def toy_questions():
    return make_toy_questions()


@pytest.fixture
def toy_vocab(toy_store, toy_questions):
    return build_vocab(toy_store, toy_questions)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_synthetic(GenConfig(**TINY_GEN))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
