"""Detachable encoder/decoder branches and the three training flows.

A branch owns every parameter its forward pass touches (embedding, blocks,
final norm and, for decoders, the output projection), so any encoder can be
paired with any decoder of the same width and vocabulary.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from enum import Enum
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .corpus import ParallelPair
from .errors import DimMismatch, FlowDataMismatch, MissingBranch, VocabMismatch
from .tokenizer import EOS, PAD, Vocabulary, decode, encode

NEG_INF = -1e9
ENCODER, DECODER = "encoder", "decoder"
MULTILINGUAL = "multilingual"


@dataclass(frozen=True, order=True)
class BranchId:
    kind: str
    scope: str = MULTILINGUAL

    def __post_init__(self):
        if self.kind not in (ENCODER, DECODER):
            raise ValueError(f"unknown branch kind {self.kind!r}")
        if not self.scope:
            raise ValueError("empty branch scope")

    @property
    def multilingual(self) -> bool:
        return self.scope == MULTILINGUAL

    @property
    def lang(self) -> str | None:
        return None if self.multilingual else self.scope

    def __str__(self) -> str:
        if self.multilingual:
            return "M-enc" if self.kind == ENCODER else "M-dec"
        return f"{'E' if self.kind == ENCODER else 'D'}:{self.scope}"

    @classmethod
    def parse(cls, text: str, kind: str | None = None) -> "BranchId":
        """Accepts ``M-enc``, ``M-dec``, ``E:xx``, ``D:xx``, or bare ``M`` when ``kind`` is given."""
        text = text.strip()
        if text in ("M-enc", "M-dec"):
            return cls(ENCODER if text == "M-enc" else DECODER)
        if text == "M" and kind is not None:
            return cls(kind)
        head, sep, code = text.partition(":")
        if sep and code and head in ("E", "D"):
            parsed = cls(ENCODER if head == "E" else DECODER, code)
            if kind is not None and parsed.kind != kind:
                raise ValueError(f"{text!r} is not a {kind} branch")
            return parsed
        raise ValueError(f"cannot parse branch id {text!r}")

    @classmethod
    def m_enc(cls) -> "BranchId":
        return cls(ENCODER)

    @classmethod
    def m_dec(cls) -> "BranchId":
        return cls(DECODER)

    @classmethod
    def e(cls, lang: str) -> "BranchId":
        return cls(ENCODER, lang)

    @classmethod
    def d(cls, lang: str) -> "BranchId":
        return cls(DECODER, lang)


@dataclass(frozen=True)
class Dims:
    d_model: int = 64
    heads: int = 4
    n_layers: int = 2
    ff_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    def to_json(self) -> dict:
        return asdict(self)


def _attn_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for w in ("q", "k", "v", "o"):
        out += [(f"{prefix}.w{w}", (d, d)), (f"{prefix}.b{w}", (d,))]
    return out


def _ln_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def param_shapes(kind: str, dims: Dims, vocab_size: int) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order for a branch; checkpoints follow it."""
    d, f = dims.d_model, dims.d_model * dims.ff_mult
    shapes = [("embed", (vocab_size, d))]
    for i in range(dims.n_layers):
        p = f"layers.{i}"
        shapes += _ln_shapes(f"{p}.ln_self", d) + _attn_shapes(f"{p}.self", d)
        if kind == DECODER:
            shapes += _ln_shapes(f"{p}.ln_cross", d) + _attn_shapes(f"{p}.cross", d)
        shapes += _ln_shapes(f"{p}.ln_ff", d)
        shapes += [(f"{p}.ff.w1", (d, f)), (f"{p}.ff.b1", (f,)), (f"{p}.ff.w2", (f, d)), (f"{p}.ff.b2", (d,))]
    shapes += _ln_shapes("ln_final", d)
    if kind == DECODER:
        shapes += [("out.w", (d, vocab_size)), ("out.b", (vocab_size,))]
    return shapes


def _init_array(name: str, shape: tuple[int, ...], d: int, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name == "embed":
        return rng.normal(0.0, d**-0.5, shape)
    if name == "out.w":
        # near-uniform initial predictions: per-token loss starts at ln|V|
        return rng.normal(0.0, 1e-4, shape)
    if len(shape) == 2:
        return rng.normal(0.0, math.sqrt(2.0 / (shape[0] + shape[1])), shape)
    if leaf == "g":
        return np.ones(shape)
    return np.zeros(shape)


@lru_cache(maxsize=64)
def _positions(length: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)
    pe = pe.astype(dtype)
    pe.setflags(write=False)
    return pe


def _linear(x: tc.Tensor, w: tc.Tensor, b: tc.Tensor) -> tc.Tensor:
    lead = x.shape[:-1]
    y = tc.add(tc.matmul(tc.reshape(x, (-1, x.shape[-1])), w), b)
    return tc.reshape(y, (*lead, w.shape[1]))


class Branch:
    """Named parameter set for one encoder or decoder."""

    kind: str = ""

    def __init__(self, bid: BranchId, dims: Dims, vocab_size: int, vocab_hash: str, arrays: Mapping[str, np.ndarray]):
        if bid.kind != self.kind:
            raise ValueError(f"{type(self).__name__} cannot hold {bid}")
        self.id = bid
        self.dims = dims
        self.vocab_size = vocab_size
        self.vocab_hash = vocab_hash
        self.params: dict[str, tc.Parameter] = {}
        for name, shape in param_shapes(self.kind, dims, vocab_size):
            a = arrays[name]
            if tuple(a.shape) != shape:
                raise DimMismatch(f"{bid} {name}: expected {shape}, got {tuple(a.shape)}")
            self.params[name] = tc.Parameter(a, name=f"{bid}/{name}", owner=bid)

    @classmethod
    def create(cls, bid: BranchId, dims: Dims, vocab_size: int, vocab_hash: str, rng: np.random.Generator) -> "Branch":
        arrays = {n: _init_array(n, s, dims.d_model, rng) for n, s in param_shapes(cls.kind, dims, vocab_size)}
        return cls(bid, dims, vocab_size, vocab_hash, arrays)

    def clone(self, bid: BranchId) -> "Branch":
        return type(self)(bid, self.dims, self.vocab_size, self.vocab_hash, {n: p.data.copy() for n, p in self.params.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def parameters(self) -> list[tc.Parameter]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def nbytes(self) -> int:
        return self.n_params * 4

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def check_vocab(self, vocab: Vocabulary | None) -> None:
        if vocab is not None and vocab.content_hash != self.vocab_hash:
            raise VocabMismatch(f"{self.id} trained with vocab {self.vocab_hash}, got {vocab.content_hash}")

    def __getitem__(self, name: str) -> tc.Parameter:
        return self.params[name]

    def _embed(self, ids: np.ndarray) -> tc.Tensor:
        d = self.dims.d_model
        h = tc.scale(tc.embed_lookup(self["embed"], ids), math.sqrt(d))
        return tc.add(h, tc.Tensor(_positions(ids.shape[1], d, tc.default_dtype())))

    def _ln(self, x: tc.Tensor, prefix: str) -> tc.Tensor:
        return tc.layernorm(x, self[f"{prefix}.g"], self[f"{prefix}.b"])

    def _attention(self, x: tc.Tensor, kv: tc.Tensor, prefix: str, blocked: np.ndarray) -> tc.Tensor:
        """Multi-head attention; ``blocked`` broadcasts to (B, heads, Tq, Tk), True = no attention."""
        B, Tq, d = x.shape
        Tk = kv.shape[1]
        h = self.dims.heads
        dh = d // h

        def heads(t, T):
            return tc.transpose(tc.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

        q = heads(_linear(x, self[f"{prefix}.wq"], self[f"{prefix}.bq"]), Tq)
        k = heads(_linear(kv, self[f"{prefix}.wk"], self[f"{prefix}.bk"]), Tk)
        v = heads(_linear(kv, self[f"{prefix}.wv"], self[f"{prefix}.bv"]), Tk)
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        weights = tc.softmax_lastdim(tc.masked_fill(scores, blocked, NEG_INF))
        ctx = tc.reshape(tc.transpose(tc.matmul(weights, v), (0, 2, 1, 3)), (B, Tq, d))
        return _linear(ctx, self[f"{prefix}.wo"], self[f"{prefix}.bo"])

    def _ff(self, x: tc.Tensor, prefix: str) -> tc.Tensor:
        hidden = tc.relu(_linear(x, self[f"{prefix}.w1"], self[f"{prefix}.b1"]))
        return _linear(hidden, self[f"{prefix}.w2"], self[f"{prefix}.b2"])


class EncoderBranch(Branch):
    kind = ENCODER

    def forward(self, ids: np.ndarray, pad_mask: np.ndarray) -> tc.Tensor:
        ids = np.asarray(ids)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if ids.ndim != 2 or ids.shape != pad_mask.shape:
            raise tc.ShapeMismatch(f"encoder input {ids.shape} vs pad mask {pad_mask.shape}")
        blocked = pad_mask[:, None, None, :]
        x = self._embed(ids)
        for i in range(self.dims.n_layers):
            p = f"layers.{i}"
            y = self._ln(x, f"{p}.ln_self")
            x = tc.add(x, self._attention(y, y, f"{p}.self", blocked))
            x = tc.add(x, self._ff(self._ln(x, f"{p}.ln_ff"), f"{p}.ff"))
        return self._ln(x, "ln_final")


class DecoderBranch(Branch):
    kind = DECODER

    def forward(self, memory: tc.Tensor, memory_pad: np.ndarray, ids: np.ndarray, pad_mask: np.ndarray | None = None) -> tc.Tensor:
        ids = np.asarray(ids)
        if memory.ndim != 3 or memory.shape[-1] != self.dims.d_model:
            raise DimMismatch(f"{self.id} expects hidden width {self.dims.d_model}, got {memory.shape}")
        if memory.shape[0] != ids.shape[0]:
            raise tc.ShapeMismatch(f"batch of memory {memory.shape} vs prefix {ids.shape}")
        T = ids.shape[1]
        pad_mask = np.zeros(ids.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        self_blocked = causal[None, None] | pad_mask[:, None, None, :]
        cross_blocked = np.asarray(memory_pad, dtype=bool)[:, None, None, :]
        x = self._embed(ids)
        for i in range(self.dims.n_layers):
            p = f"layers.{i}"
            y = self._ln(x, f"{p}.ln_self")
            x = tc.add(x, self._attention(y, y, f"{p}.self", self_blocked))
            x = tc.add(x, self._attention(self._ln(x, f"{p}.ln_cross"), memory, f"{p}.cross", cross_blocked))
            x = tc.add(x, self._ff(self._ln(x, f"{p}.ln_ff"), f"{p}.ff"))
        return _linear(self._ln(x, "ln_final"), self["out.w"], self["out.b"])


def make_branch(bid: BranchId, dims: Dims, vocab_size: int, vocab_hash: str, arrays: Mapping[str, np.ndarray]) -> Branch:
    cls = EncoderBranch if bid.kind == ENCODER else DecoderBranch
    return cls(bid, dims, vocab_size, vocab_hash, arrays)


def create_branch(bid: BranchId, dims: Dims, vocab: Vocabulary, rng: np.random.Generator) -> Branch:
    cls = EncoderBranch if bid.kind == ENCODER else DecoderBranch
    return cls.create(bid, dims, len(vocab), vocab.content_hash, rng)


# --- flows -------------------------------------------------------------------


class Flow(str, Enum):
    MIX = "Mix"
    ENC = "Enc"
    DEC = "Dec"
    CUSTOM = "Custom"


@dataclass(frozen=True)
class FlowSpec:
    flow: Flow
    encoder: BranchId
    decoder: BranchId

    def __post_init__(self):
        if self.encoder.kind != ENCODER or self.decoder.kind != DECODER:
            raise ValueError(f"flow needs an encoder then a decoder, got {self.encoder}, {self.decoder}")
        expected = {
            Flow.MIX: (True, True),
            Flow.ENC: (False, True),
            Flow.DEC: (True, False),
        }.get(self.flow)
        if expected is not None and (self.encoder.multilingual, self.decoder.multilingual) != expected:
            raise ValueError(f"{self.flow.value}-Flow cannot use {self.encoder} + {self.decoder}")

    @classmethod
    def of(cls, encoder: BranchId, decoder: BranchId) -> "FlowSpec":
        kinds = {(True, True): Flow.MIX, (False, True): Flow.ENC, (True, False): Flow.DEC}
        return cls(kinds.get((encoder.multilingual, decoder.multilingual), Flow.CUSTOM), encoder, decoder)

    @classmethod
    def mix(cls) -> "FlowSpec":
        return cls(Flow.MIX, BranchId.m_enc(), BranchId.m_dec())

    @classmethod
    def enc(cls, lang: str) -> "FlowSpec":
        return cls(Flow.ENC, BranchId.e(lang), BranchId.m_dec())

    @classmethod
    def dec(cls, lang: str) -> "FlowSpec":
        return cls(Flow.DEC, BranchId.m_enc(), BranchId.d(lang))

    def check_direction(self, src_lang: str, tgt_lang: str) -> None:
        if self.encoder.lang is not None and src_lang != self.encoder.lang:
            raise FlowDataMismatch(f"{self} cannot take source language {src_lang!r}")
        if self.decoder.lang is not None and tgt_lang != self.decoder.lang:
            raise FlowDataMismatch(f"{self} cannot produce target language {tgt_lang!r}")

    def __str__(self) -> str:
        return f"{self.flow.value}({self.encoder} + {self.decoder})"


def _resolve(spec: FlowSpec, branches: Mapping[BranchId, Branch]) -> tuple[EncoderBranch, DecoderBranch]:
    missing = [str(b) for b in (spec.encoder, spec.decoder) if b not in branches]
    if missing:
        raise MissingBranch(f"{', '.join(missing)} not loaded")
    enc, dec = branches[spec.encoder], branches[spec.decoder]
    if enc.dims.d_model != dec.dims.d_model:
        raise DimMismatch(f"{enc.id} width {enc.dims.d_model} vs {dec.id} width {dec.dims.d_model}")
    if enc.vocab_hash != dec.vocab_hash:
        raise VocabMismatch(f"{enc.id} vocab {enc.vocab_hash} vs {dec.id} vocab {dec.vocab_hash}")
    return enc, dec


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns (ids, pad_mask) with True marking padding."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    mask = np.arange(width)[None, :] >= np.array([len(s) for s in seqs])[:, None]
    return ids, mask


def encode_seq(branch: EncoderBranch, seqs: Sequence[Sequence[int]], vocab: Vocabulary | None = None) -> tuple[tc.Tensor, np.ndarray]:
    """Hidden states (batch, seq, d) in the unified space, plus the source pad mask."""
    branch.check_vocab(vocab)
    ids, mask = pad_batch(seqs)
    return branch.forward(ids, mask), mask


def decode_logits(branch: DecoderBranch, memory: tc.Tensor, memory_pad: np.ndarray, prefixes: Sequence[Sequence[int]]) -> tc.Tensor:
    ids, mask = pad_batch(prefixes)
    return branch.forward(memory, memory_pad, ids, mask)


def teacher_forced_loss(enc: EncoderBranch, dec: DecoderBranch, src_seqs, tgt_seqs, frozen_encoder: bool = False) -> tc.Tensor:
    """Mean token NLL; ``tgt_seqs`` are ``[tgt_tag, ..., EOS]`` so the tag stands in for BOS."""
    if frozen_encoder:
        with tc.no_tape():
            memory, memory_pad = encode_seq(enc, src_seqs)
    else:
        memory, memory_pad = encode_seq(enc, src_seqs)
    logits = decode_logits(dec, memory, memory_pad, [t[:-1] for t in tgt_seqs])
    targets, _ = pad_batch([t[1:] for t in tgt_seqs])
    return tc.nll_loss(logits, targets, ignore_index=PAD)


def encode_pairs(pairs: Sequence[ParallelPair], vocab: Vocabulary) -> tuple[list[list[int]], list[list[int]]]:
    return (
        [encode(p.src_text, p.src_lang, vocab) for p in pairs],
        [encode(p.tgt_text, p.tgt_lang, vocab) for p in pairs],
    )


def flow_loss(
    spec: FlowSpec,
    pairs: Sequence[ParallelPair],
    vocab: Vocabulary,
    branches: Mapping[BranchId, Branch],
    frozen_encoder: bool = False,
) -> tc.Tensor:
    """Teacher-forced per-token negative log-likelihood for one flow."""
    if not pairs:
        raise ValueError("empty batch")
    for p in pairs:
        spec.check_direction(p.src_lang, p.tgt_lang)
    enc, dec = _resolve(spec, branches)
    enc.check_vocab(vocab)
    src, tgt = encode_pairs(pairs, vocab)
    return teacher_forced_loss(enc, dec, src, tgt, frozen_encoder)


def translate_batch(
    spec: FlowSpec,
    sources: Sequence[str],
    src_lg: str,
    tgt_lg: str,
    vocab: Vocabulary,
    branches: Mapping[BranchId, Branch],
    max_len: int = 64,
    beam: int | None = None,
) -> list[str]:
    spec.check_direction(src_lg, tgt_lg)
    enc, dec = _resolve(spec, branches)
    enc.check_vocab(vocab)
    src = [encode(s, src_lg, vocab) for s in sources]
    tag = vocab.tag_id(tgt_lg)
    if max_len <= 0 or not sources:
        return ["" for _ in sources]
    with tc.no_tape():
        if beam and beam > 1:
            outs = [_beam_search(enc, dec, s, tag, max_len, beam) for s in src]
        else:
            outs = _greedy(enc, dec, src, tag, max_len)
    return [decode(o, vocab) for o in outs]


def greedy_translate(
    spec: FlowSpec,
    src: str,
    src_lg: str,
    tgt_lg: str,
    vocab: Vocabulary,
    branches: Mapping[BranchId, Branch],
    max_len: int = 64,
) -> str:
    return translate_batch(spec, [src], src_lg, tgt_lg, vocab, branches, max_len)[0]


def _greedy(enc: EncoderBranch, dec: DecoderBranch, src: list[list[int]], tag: int, max_len: int) -> list[list[int]]:
    memory, memory_pad = encode_seq(enc, src)
    prefix = np.full((len(src), 1), tag, dtype=np.int64)
    done = np.zeros(len(src), dtype=bool)
    for _ in range(max_len):
        logits = dec.forward(memory, memory_pad, prefix).data[:, -1]
        nxt = np.where(done, PAD, logits.argmax(axis=-1))
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    outs = []
    for row in prefix[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        outs.append(toks)
    return outs


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _beam_search(enc: EncoderBranch, dec: DecoderBranch, src: list[int], tag: int, max_len: int, width: int) -> list[int]:
    """Length-normalized beam search for one sentence."""
    memory, memory_pad = encode_seq(enc, [src])
    beams: list[tuple[list[int], float]] = [([tag], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        k = len(beams)
        mem = tc.Tensor(np.repeat(memory.data, k, axis=0))
        logp = _log_softmax(dec.forward(mem, np.repeat(memory_pad, k, axis=0), np.array([b[0] for b in beams])).data[:, -1])
        cands = []
        for (toks, score), row in zip(beams, logp):
            for t in np.argsort(-row)[:width]:
                cands.append((toks + [int(t)], score + float(row[t])))
        cands.sort(key=lambda c: -c[1] / (len(c[0]) - 1))
        beams = []
        for toks, score in cands:
            (finished if toks[-1] == EOS else beams).append((toks, score))
            if len(beams) == width:
                break
        if len(finished) >= width or not beams:
            break
    pool = finished or beams
    best = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))[0][1:]
    return best[:-1] if best and best[-1] == EOS else best
