import numpy as np
import pytest

from legomt.branches import BranchId, Dims, create_branch
from legomt.corpus import ParallelPair
from legomt.tokenizer import train_bpe

LANGS = ["en", "de", "zh"]

TEXTS = [
    "the cat sat on the mat",
    "der hund schläft im garten",
    "我们 今天 去 学校",
    "a small dog runs fast",
    "ein kleiner hund läuft schnell",
    "猫 在 垫子 上",
]

TINY = Dims(d_model=16, heads=2, n_layers=1, ff_mult=2)


@pytest.fixture(scope="session")
def vocab():
    return train_bpe(TEXTS * 3, 320, LANGS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_branches(vocab, rng):
    ids = [BranchId.m_enc(), BranchId.m_dec()] + [BranchId.e(lg) for lg in LANGS] + [BranchId.d(lg) for lg in LANGS]
    return {b: create_branch(b, TINY, vocab, rng) for b in ids}


def toy_pairs(src, tgt, n=6):
    words = ["alpha", "beta", "gamma", "delta", "eps"]
    return [
        ParallelPair(src, tgt, " ".join(words[(i + k) % 5] for k in range(3)), " ".join(words[(i + k) % 5][::-1] for k in range(3)))
        for i in range(n)
    ]


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
