"""Byte-level BPE with reserved language-tag tokens.

Id layout is fixed: specials first, then one ``__lg__`` tag per language,
then the 256 byte tokens, then merges in the order they were learned.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .errors import UnknownLanguageTag, VocabTooSmall

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
PAD, BOS, EOS, UNK = range(4)

# whitespace attaches to the following word; chunks partition the text exactly
_CHUNK = re.compile(r"\s*\S+|\s+")


def tag_token(code: str) -> str:
    return f"__{code}__"


@lru_cache(maxsize=1)
def _byte_glyphs() -> list[str]:
    # printable stand-in for every byte, so merged tokens render as strings
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    glyphs = {}
    extra = 0
    for b in range(256):
        if b in keep:
            glyphs[b] = chr(b)
        else:
            glyphs[b] = chr(0x100 + extra)
            extra += 1
    return [glyphs[b] for b in range(256)]


def _render(data: bytes) -> str:
    g = _byte_glyphs()
    return "".join(g[b] for b in data)


def _chunks(text: str) -> list[bytes]:
    return [c.encode("utf-8") for c in _CHUNK.findall(text)]


class Vocabulary:
    """Immutable shared vocabulary; build with :func:`train_bpe` or :meth:`load`."""

    def __init__(self, lang_codes: Sequence[str], merges: Sequence[tuple[bytes, bytes]]):
        self.lang_codes = tuple(lang_codes)
        if len(set(self.lang_codes)) != len(self.lang_codes):
            raise ValueError("duplicate language codes")
        self.merges = tuple((bytes(a), bytes(b)) for a, b in merges)
        self.specials = dict(zip(("PAD", "BOS", "EOS", "UNK"), range(len(SPECIALS))))
        self.lang_tags = {c: len(SPECIALS) + i for i, c in enumerate(self.lang_codes)}
        self.byte_offset = len(SPECIALS) + len(self.lang_codes)

        self.id_to_bytes: list[bytes | None] = [None] * self.byte_offset
        self.id_to_bytes += [bytes([b]) for b in range(256)]
        self.id_to_token = list(SPECIALS) + [tag_token(c) for c in self.lang_codes]
        self.id_to_token += [_render(bytes([b])) for b in range(256)]
        self._bytes_to_id = {bytes([b]): self.byte_offset + b for b in range(256)}
        self._ranks: dict[tuple[int, int], tuple[int, int]] = {}
        for rank, (a, b) in enumerate(self.merges):
            new_id = len(self.id_to_token)
            self._ranks[(self._bytes_to_id[a], self._bytes_to_id[b])] = (rank, new_id)
            self.id_to_bytes.append(a + b)
            self.id_to_token.append(_render(a + b))
            self._bytes_to_id[a + b] = new_id
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("token strings collide; vocabulary is not invertible")
        self.content_hash = self._hash()
        self._cache: dict[bytes, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.to_json() == other.to_json()

    def _payload(self) -> dict:
        return {
            "specials": list(SPECIALS),
            "lang_tags": list(self.lang_codes),
            "merges": [[a.hex(), b.hex()] for a, b in self.merges],
        }

    def _hash(self) -> str:
        blob = json.dumps(self._payload(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def tag_id(self, code: str) -> int:
        try:
            return self.lang_tags[code]
        except KeyError:
            raise UnknownLanguageTag(f"language {code!r} has no tag in this vocabulary") from None

    def _bpe(self, chunk: bytes) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        ids = [self.byte_offset + b for b in chunk]
        ranks = self._ranks
        while len(ids) > 1:
            best = None
            for i in range(len(ids) - 1):
                r = ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best is None or r[0] < best[0]):
                    best = (r[0], r[1], i)
            if best is None:
                break
            _, new_id, _ = best
            pair = (ids[best[2]], ids[best[2] + 1])
            merged, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        out = tuple(ids)
        self._cache[chunk] = out
        return out

    def encode_text(self, text: str) -> list[int]:
        """Content ids only: no tag, no EOS."""
        return [i for c in _chunks(text) for i in self._bpe(c)]

    def to_json(self) -> dict:
        return {"format": "legomt-vocab", "version": 1, **self._payload(), "content_hash": self.content_hash}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("format") != "legomt-vocab":
            raise ValueError("not a vocabulary file")
        if tuple(obj["specials"]) != SPECIALS:
            raise ValueError(f"unexpected specials {obj['specials']}")
        vocab = cls(obj["lang_tags"], [(bytes.fromhex(a), bytes.fromhex(b)) for a, b in obj["merges"]])
        if obj.get("content_hash") != vocab.content_hash:
            raise ValueError("vocabulary content_hash does not match its contents")
        return vocab

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def train_bpe(corpus: Iterable[str], vocab_size: int, lang_codes: Sequence[str]) -> Vocabulary:
    """Learn merges greedily by pair frequency; ties go to the smallest (bytes, bytes) pair."""
    base = len(SPECIALS) + len(lang_codes) + 256
    if vocab_size <= base:
        raise VocabTooSmall(f"vocab_size {vocab_size} must exceed specials+tags+bytes = {base}")
    reserved = set(SPECIALS) | {tag_token(c) for c in lang_codes}

    freqs = Counter(c for text in corpus for c in _chunks(text))
    words = [[bytes([b]) for b in chunk] for chunk in freqs]
    counts = list(freqs.values())
    merges: list[tuple[bytes, bytes]] = []
    banned: set[tuple[bytes, bytes]] = set()
    known = {bytes([b]) for b in range(256)}
    while base + len(merges) < vocab_size:
        pairs: Counter = Counter()
        for w, n in zip(words, counts):
            for i in range(len(w) - 1):
                pairs[(w[i], w[i + 1])] += n
        candidates = [(n, p) for p, n in pairs.items() if p not in banned]
        if not candidates:
            break
        top = max(n for n, _ in candidates)
        best = min(p for n, p in candidates if n == top)
        joined = best[0] + best[1]
        # keep token strings unique and never spell a reserved token
        if joined in known or _render(joined) in reserved:
            banned.add(best)
            continue
        merges.append(best)
        known.add(joined)
        for k, w in enumerate(words):
            if len(w) < 2:
                continue
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == best[0] and w[i + 1] == best[1]:
                    out.append(joined)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[k] = out
    return Vocabulary(lang_codes, merges)


def encode(text: str, src_tag: str, vocab: Vocabulary) -> list[int]:
    """``[tag(src_tag)] + BPE(text) + [EOS]``."""
    return [vocab.tag_id(src_tag), *vocab.encode_text(text), EOS]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    data = b"".join(vocab.id_to_bytes[i] or b"" for i in ids)
    return data.decode("utf-8", errors="replace")
