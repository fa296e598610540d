"""Branch checkpoints, the on-disk branch store, and residency accounting.

Checkpoint layout (all integers little-endian)::

    b"LEGO" | version:u16 | header_len:u32 | header (JSON, utf-8) | payload | trailer

``payload`` is every tensor as float32 in the branch's canonical parameter
order; the header lists (name, shape, offset) per tensor together with the
payload size and its SHA-256. ``trailer`` is the SHA-256 of header + payload,
so a flipped byte anywhere in the file is caught.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensorcore as tc
from .branches import (
    Branch,
    BranchId,
    DecoderBranch,
    Dims,
    EncoderBranch,
    FlowSpec,
    make_branch,
    param_shapes,
    teacher_forced_loss,
)
from .errors import CorruptCheckpoint, DigestMismatch, DimMismatch, MissingBranch, VersionMismatch, VocabMismatch

log = logging.getLogger(__name__)

MAGIC = b"LEGO"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")
_TRAILER = 32


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(branch: Branch) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, p in branch.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = _json_bytes(
        {
            "branch": str(branch.id),
            "kind": branch.id.kind,
            "scope": branch.id.scope,
            "dims": branch.dims.to_json(),
            "vocab_size": branch.vocab_size,
            "vocab_hash": branch.vocab_hash,
            "tensors": tensors,
            "payload_bytes": len(payload),
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
    )
    trailer = hashlib.sha256(header + payload).digest()
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload + trailer


def branch_from_bytes(data: bytes) -> Branch:
    if len(data) < _PREAMBLE.size + _TRAILER:
        raise CorruptCheckpoint(f"file too short ({len(data)} bytes)")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, reader supports {FORMAT_VERSION}")
    start = _PREAMBLE.size
    if start + header_len + _TRAILER > len(data):
        raise CorruptCheckpoint("header length runs past end of file")
    header_raw = data[start : start + header_len]
    try:
        header = json.loads(header_raw.decode("utf-8"))
        payload_bytes = int(header["payload_bytes"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    if start + header_len + payload_bytes + _TRAILER != len(data):
        raise CorruptCheckpoint(f"expected {start + header_len + payload_bytes + _TRAILER} bytes, file has {len(data)}")
    payload = data[start + header_len : start + header_len + payload_bytes]
    if hashlib.sha256(header_raw + payload).digest() != data[-_TRAILER:]:
        raise DigestMismatch("checkpoint digest does not match contents")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise DigestMismatch("payload digest mismatch")
    try:
        bid = BranchId(header["kind"], header["scope"])
        dims = Dims(**header["dims"])
        arrays = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"])
            arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
        expected = [n for n, _ in param_shapes(bid.kind, dims, header["vocab_size"])]
        if [t["name"] for t in header["tensors"]] != expected:
            raise CorruptCheckpoint("tensor directory does not match the branch layout")
        return make_branch(bid, dims, header["vocab_size"], header["vocab_hash"], arrays)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"inconsistent header: {exc}") from None


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_branch(branch: Branch, path: str | Path) -> str:
    """Write a checkpoint; returns the SHA-256 of the file bytes."""
    data = checkpoint_bytes(branch)
    _atomic_write(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load_branch(path: str | Path) -> Branch:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingBranch(f"no checkpoint at {path}") from None
    return branch_from_bytes(data)


@dataclass
class ResidencyLedger:
    """Parameters currently held in memory, per branch (float32, 4 bytes each)."""

    loaded: dict[BranchId, int] = field(default_factory=dict)
    staged: dict[BranchId, int] = field(default_factory=dict)
    peak_bytes: int = 0

    @property
    def total_params(self) -> int:
        return sum(self.loaded.values()) + sum(self.staged.values())

    @property
    def total_bytes(self) -> int:
        return 4 * self.total_params

    def _touch(self) -> None:
        self.peak_bytes = max(self.peak_bytes, self.total_bytes)

    def add(self, bid: BranchId, n_params: int) -> None:
        self.staged.pop(bid, None)
        self.loaded[bid] = n_params
        self._touch()

    def remove(self, bid: BranchId) -> None:
        self.loaded.pop(bid, None)

    def stage(self, bid: BranchId, n_params: int) -> None:
        self.staged[bid] = n_params
        self._touch()

    def unstage(self, bid: BranchId) -> None:
        self.staged.pop(bid, None)

    def reset_peak(self) -> None:
        self.peak_bytes = self.total_bytes

    def to_json(self) -> dict:
        return {
            "loaded": {str(b): n * 4 for b, n in sorted(self.loaded.items())},
            "staged": {str(b): n * 4 for b, n in sorted(self.staged.items())},
            "total_bytes": self.total_bytes,
            "peak_bytes": self.peak_bytes,
        }


def _file_stem(bid: BranchId) -> str:
    return str(bid).replace(":", "_")


class BranchStore:
    """One checkpoint file per branch plus a ``manifest.json`` index.

    Mutations (put, write-back, manifest updates) go through one lock. At most
    one prefetch is in flight; it hands a validated branch over a queue of
    size one.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self._lock = threading.Lock()
        self.resident: dict[BranchId, Branch] = {}
        self.dirty: set[BranchId] = set()
        self.ledger = ResidencyLedger()
        self._prefetch: tuple[BranchId, threading.Thread, queue.Queue] | None = None
        if self.manifest_path.exists():
            self._manifest = json.loads(self.manifest_path.read_text())
        else:
            self._manifest = {"format": "legomt-store", "version": 1, "branches": {}}

    # -- index --

    def ids(self) -> list[BranchId]:
        return sorted(BranchId(e["kind"], e["scope"]) for e in self._manifest["branches"].values())

    def has(self, bid: BranchId) -> bool:
        return str(bid) in self._manifest["branches"]

    def info(self, bid: BranchId) -> dict:
        try:
            return self._manifest["branches"][str(bid)]
        except KeyError:
            raise MissingBranch(f"{bid} is not in store {self.root}") from None

    def manifest(self) -> dict:
        return json.loads(json.dumps(self._manifest))

    def _write_manifest(self) -> None:
        _atomic_write(self.manifest_path, (json.dumps(self._manifest, indent=1, sort_keys=True) + "\n").encode())

    def put(self, branch: Branch) -> None:
        """Persist ``branch`` (and keep it resident if it already is)."""
        with self._lock:
            path = self.root / f"{_file_stem(branch.id)}.lego"
            digest = save_branch(branch, path)
            self._manifest["branches"][str(branch.id)] = {
                "file": path.name,
                "kind": branch.id.kind,
                "scope": branch.id.scope,
                "dims": branch.dims.to_json(),
                "vocab_size": branch.vocab_size,
                "vocab_hash": branch.vocab_hash,
                "n_params": branch.n_params,
                "file_sha256": digest,
            }
            self._write_manifest()
            if branch.id in self.resident:
                self.resident[branch.id] = branch
            self.dirty.discard(branch.id)

    def load(self, bid: BranchId) -> Branch:
        """Read a branch from disk without touching residency."""
        return load_branch(self.root / self.info(bid)["file"])

    # -- residency --

    def mark_dirty(self, bid: BranchId) -> None:
        if bid not in self.resident:
            raise MissingBranch(f"{bid} is not resident")
        self.dirty.add(bid)

    def release(self, bid: BranchId) -> None:
        branch = self.resident.pop(bid, None)
        if branch is None:
            return
        if bid in self.dirty:
            self.put(branch)
        self.ledger.remove(bid)

    def discard(self) -> None:
        """Drop every resident branch without writing back (disk keeps the last checkpoint)."""
        self._take_prefetched(None)
        for bid in list(self.resident):
            self.ledger.remove(bid)
        self.resident.clear()
        self.dirty.clear()

    def flush(self) -> None:
        for bid in sorted(self.dirty):
            self.put(self.resident[bid])

    def acquire(self, wanted: Iterable[BranchId]) -> dict[BranchId, Branch]:
        """Make the resident set exactly ``wanted``; dirty evictees are written back first."""
        wanted = list(dict.fromkeys(wanted))
        for bid in wanted:
            self.info(bid)
        for bid in [b for b in self.resident if b not in wanted]:
            self.release(bid)
        for bid in wanted:
            if bid not in self.resident:
                branch = self._take_prefetched(bid) or self.load(bid)
                self.resident[bid] = branch
                self.ledger.add(bid, branch.n_params)
        self._take_prefetched(None)
        return {b: self.resident[b] for b in wanted}

    def insert(self, branch: Branch) -> None:
        """Register a new in-memory branch as resident and persist it."""
        self.put(branch)
        self.resident[branch.id] = branch
        self.ledger.add(branch.id, branch.n_params)

    def prefetch(self, bid: BranchId) -> None:
        """Start reading ``bid`` from disk on a worker thread (no-op if resident)."""
        if bid in self.resident or not self.has(bid):
            return
        self._take_prefetched(None)
        q: queue.Queue = queue.Queue(maxsize=1)
        path = self.root / self.info(bid)["file"]

        def work():
            try:
                q.put(load_branch(path))
            except Exception as exc:  # surfaced to the consumer
                q.put(exc)

        thread = threading.Thread(target=work, name=f"prefetch-{bid}", daemon=True)
        self.ledger.stage(bid, self.info(bid)["n_params"])
        self._prefetch = (bid, thread, q)
        thread.start()

    def _take_prefetched(self, bid: BranchId | None) -> Branch | None:
        """Hand over the pending prefetch if it is ``bid``; discard it otherwise."""
        if self._prefetch is None:
            return None
        pending, thread, q = self._prefetch
        if bid is not None and pending != bid:
            return None
        self._prefetch = None
        thread.join()
        item = q.get()
        self.ledger.unstage(pending)
        if bid is None:
            return None
        if isinstance(item, Exception):
            raise item
        return item

    def compose(self, encoder: BranchId, decoder: BranchId) -> FlowSpec:
        """Validate an encoder/decoder pairing and make exactly those two resident."""
        enc_info, dec_info = self.info(encoder), self.info(decoder)
        spec = FlowSpec.of(encoder, decoder)
        if enc_info["dims"]["d_model"] != dec_info["dims"]["d_model"]:
            raise DimMismatch(f"{encoder} d={enc_info['dims']['d_model']} vs {decoder} d={dec_info['dims']['d_model']}")
        if enc_info["vocab_hash"] != dec_info["vocab_hash"]:
            raise VocabMismatch(f"{encoder} vocab {enc_info['vocab_hash']} vs {decoder} vocab {dec_info['vocab_hash']}")
        self.acquire([encoder, decoder])
        return spec


# --- residency benchmark ---------------------------------------------------


def _step_seconds(branches: list[Branch], enc: Branch, dec: Branch, rng: np.random.Generator, tokens: int) -> float:
    """Wall time for one forward/backward through (enc, dec) plus an Adam update of every resident parameter."""
    vocab = enc.vocab_size
    rows = max(tokens // 16, 1)
    src = [list(rng.integers(4, vocab, size=16)) for _ in range(rows)]
    tgt = [list(rng.integers(4, vocab, size=16)) for _ in range(rows)]
    params = [p for b in branches for p in b.parameters()]
    start = time.perf_counter()
    with tc.Tape() as tape:
        loss = teacher_forced_loss(enc, dec, src, tgt)
    tc.backward(loss, tape)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    tc.adam_step(params, tc.AdamState())
    return time.perf_counter() - start


def residency_report(
    k: int,
    workdir: str | Path,
    dims: Dims = Dims(),
    vocab_size: int = 1000,
    seed: int = 0,
    tokens: int = 512,
) -> dict:
    """Loaded bytes and step time: a K-way multi-way model vs. Lego-style residency.

    Multi-way keeps all K language-specific encoders and decoders resident.
    Lego keeps the multilingual pair plus one language-specific branch: an
    encoder in stage 1, a decoder in stage 2. The headline ratio divides the
    multi-way bytes by the mean of the two stage residencies.
    """
    if k < 2:
        raise ValueError("need at least two branch pairs")
    store = BranchStore(workdir)
    rng = np.random.default_rng(seed)
    langs = [f"b{i}" for i in range(k)]
    theta_enc = EncoderBranch.create(BranchId.m_enc(), dims, vocab_size, "bench", rng)
    theta_dec = DecoderBranch.create(BranchId.m_dec(), dims, vocab_size, "bench", rng)
    store.put(theta_enc)
    store.put(theta_dec)
    for lg in langs:
        store.put(theta_enc.clone(BranchId.e(lg)))
        store.put(theta_dec.clone(BranchId.d(lg)))

    def scenario(ids: list[BranchId], enc: BranchId, dec: BranchId) -> dict:
        store.acquire([])
        store.ledger.reset_peak()
        t0 = time.perf_counter()
        resident = store.acquire(ids)
        load_s = time.perf_counter() - t0
        step_s = _step_seconds(list(resident.values()), resident[enc], resident[dec], rng, tokens)
        return {
            "branches": [str(b) for b in ids],
            "bytes": store.ledger.total_bytes,
            "params": store.ledger.total_params,
            "load_seconds": load_s,
            "step_seconds": step_s,
        }

    multiway = scenario(
        [BranchId.e(lg) for lg in langs] + [BranchId.d(lg) for lg in langs], BranchId.e(langs[0]), BranchId.d(langs[1])
    )
    m_pair = [BranchId.m_enc(), BranchId.m_dec()]
    lego1 = scenario(m_pair + [BranchId.e(langs[0])], BranchId.e(langs[0]), BranchId.m_dec())
    lego2 = scenario(m_pair + [BranchId.d(langs[0])], BranchId.m_enc(), BranchId.d(langs[0]))
    store.acquire([])

    lego_mean = Fraction(lego1["bytes"] + lego2["bytes"], 2)
    ratio = Fraction(multiway["bytes"]) / lego_mean
    lego_time = (lego1["load_seconds"] + lego1["step_seconds"] + lego2["load_seconds"] + lego2["step_seconds"]) / 2
    multi_time = multiway["load_seconds"] + multiway["step_seconds"]
    return {
        "k": k,
        "dims": dims.to_json(),
        "vocab_size": vocab_size,
        "encoder_params": theta_enc.n_params,
        "decoder_params": theta_dec.n_params,
        "multiway": multiway,
        "lego_stage1": lego1,
        "lego_stage2": lego2,
        "lego_mean_bytes": float(lego_mean),
        "byte_ratio": f"{ratio.numerator}/{ratio.denominator}",
        "byte_ratio_value": float(ratio),
        "closed_form": f"{Fraction(2 * k, 3).numerator}/{Fraction(2 * k, 3).denominator}",
        "time_ratio": multi_time / lego_time if lego_time > 0 else None,
    }


def render_residency(report: dict) -> str:
    lines = [
        f"{'Method':<22}{'Size (MB)':>12}{'Time (s)':>12}",
        f"{'Multi-Way Training':<22}{report['multiway']['bytes'] / 2**20:>12.3f}"
        f"{report['multiway']['load_seconds'] + report['multiway']['step_seconds']:>12.4f}",
    ]
    for key, label in (("lego_stage1", "Lego stage 1"), ("lego_stage2", "Lego stage 2")):
        row = report[key]
        lines.append(f"{label:<22}{row['bytes'] / 2**20:>12.3f}{row['load_seconds'] + row['step_seconds']:>12.4f}")
    lines.append(f"byte ratio multi-way / lego = {report['byte_ratio']} ({report['byte_ratio_value']:.4f}); closed form 2K/3 = {report['closed_form']}")
    if report.get("time_ratio"):
        lines.append(f"time ratio (reported only) = {report['time_ratio']:.2f}x")
    return "\n".join(lines)
