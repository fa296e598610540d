"""Synthetic parallel data: K invented languages that render one shared sentence.

Every language writes the same underlying word sequence through a bijective
transform of the lowercase alphabet (identity, a keyed substitution cipher,
per-word reversal, or both), so exact translations exist and can be scored.
"""

from __future__ import annotations

import hashlib
import random
import string
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import ParallelPair, write_jsonl

TRANSFORMS = ("identity", "cipher", "reverse", "cipher+reverse")
ALPHABET = string.ascii_lowercase


def _rng(seed: int, *keys: object) -> random.Random:
    material = "|".join(map(str, (seed,) + keys)).encode()
    return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:8], "little"))


def lang_codes(k: int) -> list[str]:
    if not 2 <= k <= 26:
        raise ValueError("need 2..26 synthetic languages")
    return ["qs" + ALPHABET[i] for i in range(k)]


@dataclass
class SyntheticTaskSpec:
    languages: list[str]
    transforms: dict[str, str]
    min_words: int = 3
    max_words: int = 8
    pairs: int = 2000
    sizes: dict[str, int] = field(default_factory=dict)  # "src-tgt" -> pair count
    lexicon_size: int = 40
    seed: int = 0

    @classmethod
    def default(cls, k: int = 4, pairs: int = 2000, seed: int = 0, **kw) -> "SyntheticTaskSpec":
        langs = lang_codes(k)
        return cls(langs, {lg: TRANSFORMS[i % len(TRANSFORMS)] for i, lg in enumerate(langs)}, pairs=pairs, seed=seed, **kw)

    def __post_init__(self):
        for lg in self.languages:
            if self.transforms.get(lg) not in TRANSFORMS:
                raise ValueError(f"bad transform for {lg}: {self.transforms.get(lg)}")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("bad sentence length range")

    def size(self, src: str, tgt: str) -> int:
        return self.sizes.get(f"{src}-{tgt}", self.pairs)

    def high_resource(self) -> list[tuple[str, str]]:
        """The two directions between the first two languages."""
        a, b = self.languages[:2]
        return [(a, b), (b, a)]


def cipher_key(lang: str, seed: int) -> dict[str, str]:
    letters = list(ALPHABET)
    _rng(seed, "cipher", lang).shuffle(letters)
    return dict(zip(ALPHABET, letters))


class Renderer:
    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec
        self.keys = {lg: cipher_key(lg, spec.seed) for lg in spec.languages}

    def word(self, w: str, lang: str) -> str:
        mode = self.spec.transforms[lang]
        if "cipher" in mode:
            w = "".join(self.keys[lang][c] for c in w)
        if "reverse" in mode:
            w = w[::-1]
        return w

    def sentence(self, words: list[str], lang: str) -> str:
        return " ".join(self.word(w, lang) for w in words)


def lexicon(spec: SyntheticTaskSpec) -> list[str]:
    rng = _rng(spec.seed, "lexicon")
    words: set[str] = set()
    while len(words) < spec.lexicon_size:
        words.add("".join(rng.choice(ALPHABET) for _ in range(rng.randint(2, 6))))
    return sorted(words)


def sentences(spec: SyntheticTaskSpec, n: int, *keys: object) -> list[list[str]]:
    rng = _rng(spec.seed, "sent", *keys)
    lex = lexicon(spec)
    return [[rng.choice(lex) for _ in range(rng.randint(spec.min_words, spec.max_words))] for _ in range(n)]


def generate(spec: SyntheticTaskSpec) -> list[ParallelPair]:
    render = Renderer(spec)
    out = []
    for src in spec.languages:
        for tgt in spec.languages:
            if src == tgt:
                continue
            for words in sentences(spec, spec.size(src, tgt), src, tgt):
                out.append(ParallelPair(src, tgt, render.sentence(words, src), render.sentence(words, tgt), "synth"))
    return out


def benchmark(spec: SyntheticTaskSpec, n: int = 50) -> list[ParallelPair]:
    """A separate evaluation set drawn from a different stream."""
    render = Renderer(spec)
    out = []
    for src, tgt in spec.high_resource():
        for words in sentences(spec, n, "bench", src, tgt):
            out.append(ParallelPair(src, tgt, render.sentence(words, src), render.sentence(words, tgt), "synth-bench"))
    return out


def write(spec: SyntheticTaskSpec, out_dir: str | Path, bench_size: int = 50) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = generate(spec)
    write_jsonl(out_dir / "synth.jsonl", (p.to_json() for p in pairs))
    bench = benchmark(spec, bench_size)
    write_jsonl(out_dir / "benchmark.jsonl", (p.to_json() for p in bench))
    return {
        "languages": spec.languages,
        "transforms": spec.transforms,
        "pairs": len(pairs),
        "benchmark": len(bench),
        "high_resource": [f"{s}-{t}" for s, t in spec.high_resource()],
        "seed": spec.seed,
    }
