"""spBLEU: corpus BLEU over the shared subword tokenization."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Mapping, Sequence

from .errors import LengthMismatch
from .tokenizer import EOS, Vocabulary, encode

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_json(self) -> dict:
        out = asdict(self)
        out["precisions"] = list(self.precisions)
        return out


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]]) -> BleuScore:
    """Corpus BLEU over pre-tokenized sequences (one reference per hypothesis).

    Zero higher-order numerators are smoothed to ``1 / (total + 1)``; a zero
    unigram precision is left at zero.
    """
    if len(hypotheses) != len(references):
        raise LengthMismatch(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise LengthMismatch("need at least one segment")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = []
    for n in range(MAX_ORDER):
        if n == 0:
            precisions.append(matches[0] / totals[0] if totals[0] else 0.0)
        elif matches[n] == 0:
            precisions.append(1.0 / (totals[n] + 1))
        else:
            precisions.append(matches[n] / totals[n])

    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) <= 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuScore(score, tuple(precisions), bp, hyp_len, ref_len)


def subword_tokens(text: str, vocab: Vocabulary, lang: str | None = None) -> list[int]:
    """Tokenize for scoring: encode, then strip the language tag and EOS."""
    lang = lang if lang is not None else vocab.lang_codes[0]
    ids = encode(text, lang, vocab)
    assert ids[-1] == EOS
    return ids[1:-1]


def spbleu(hypotheses: Sequence[str], references: Sequence[str], vocab: Vocabulary, lang: str | None = None) -> BleuScore:
    if len(hypotheses) != len(references):
        raise LengthMismatch(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    return corpus_bleu(
        [subword_tokens(h, vocab, lang) for h in hypotheses],
        [subword_tokens(r, vocab, lang) for r in references],
    )


def direction_table(results: Mapping[tuple[str, str], BleuScore | float], centers: Sequence[str]) -> dict:
    """Per-center means of X->center and center->X scores, plus an overall average.

    Missing cells are ``None`` in JSON and ``-`` in the text rendering, and are
    left out of every mean.
    """
    if not results:
        raise ValueError("no results")
    scores = {d: (r.score if isinstance(r, BleuScore) else float(r)) for d, r in results.items()}

    def mean(values):
        return sum(values) / len(values) if values else None

    rows = []
    for c in centers:
        into = [s for (src, tgt), s in scores.items() if tgt == c and src != c]
        out = [s for (src, tgt), s in scores.items() if src == c and tgt != c]
        rows.append({"center": c, "x2c": mean(into), "c2x": mean(out)})
    cells = [r[k] for r in rows for k in ("x2c", "c2x") if r[k] is not None]
    report = {"rows": rows, "avg": mean(cells)}
    report["text"] = render_table(report)
    return report


def render_table(report: dict) -> str:
    def cell(v):
        return "-" if v is None else f"{v:.2f}"

    centers = [r["center"] for r in report["rows"]]
    width = max([8] + [len(c) + 2 for c in centers])
    header = "".ljust(8) + "".join(c.rjust(width) for c in centers) + "AVG".rjust(width)
    lines = [header]
    for key, label in (("x2c", "X->lg"), ("c2x", "lg->X")):
        line = label.ljust(8) + "".join(cell(r[key]).rjust(width) for r in report["rows"])
        vals = [r[key] for r in report["rows"] if r[key] is not None]
        line += cell(sum(vals) / len(vals) if vals else None).rjust(width)
        lines.append(line)
    lines.append("AVG".ljust(8) + "".rjust(width * len(centers)) + cell(report["avg"]).rjust(width))
    return "\n".join(lines)
