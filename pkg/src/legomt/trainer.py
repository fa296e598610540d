"""Two-stage, language-centric triple-flow training.

Stage 1 walks every center language in plan order; for each epoch and shard
it loads the multilingual pair plus the center's encoder and trains Enc-Flow
and Mix-Flow together. Stage 2 then copies the multilingual decoder into
every center's decoder and trains Dec-Flow with the multilingual encoder
frozen. Only the branches a shard pass needs are resident.

The schedule is a flat list of shard passes ("units"); the resumable state is
the number of completed units plus branch checkpoints and optimizer moments
written after each unit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .branches import BranchId, Dims, FlowSpec, create_branch, flow_loss
from .corpus import ParallelPair, Shard
from .errors import FlowDataMismatch, MissingBranch, PlanMismatch, TrainingAborted
from .registry import BranchStore
from .tokenizer import Vocabulary, encode

log = logging.getLogger(__name__)

STAGE1, STAGE2 = "stage1", "stage2"
M_ENC, M_DEC = BranchId.m_enc(), BranchId.m_dec()


@dataclass
class TrainingPlan:
    centers: list[str]
    shard_count: int = 4
    epochs: int = 2
    token_budget: int = 512
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stages: tuple[str, ...] = (STAGE1, STAGE2)
    prefetch: bool = False

    def __post_init__(self):
        self.centers = list(self.centers)
        self.stages = tuple(self.stages)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")
        if self.shard_count < 1:
            raise ValueError("shard_count must be >= 1")
        if not self.centers:
            raise ValueError("no center languages")
        if set(self.stages) - {STAGE1, STAGE2}:
            raise ValueError(f"unknown stages {self.stages}")

    def to_json(self) -> dict:
        out = asdict(self)
        out["stages"] = list(self.stages)
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def units(self) -> list[tuple[str, str, int, int]]:
        """Ordered shard passes: (stage, center, epoch, shard_id)."""
        out = []
        for stage in (STAGE1, STAGE2):
            if stage not in self.stages:
                continue
            for center in self.centers:
                for epoch in range(self.epochs):
                    for sid in range(self.shard_count):
                        out.append((stage, center, epoch, sid))
        return out


@dataclass
class StepLog:
    stage: str
    flow: str
    shard_id: int | None
    center: str
    losses: dict[str, float]
    tokens: int
    wall_time: float
    step: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def initialize_store(store: BranchStore, vocab: Vocabulary, dims: Dims, centers: Iterable[str], seed: int = 0) -> None:
    """Create theta_0 and clone it into the multilingual pair and one encoder per center."""
    rng = np.random.default_rng(seed)
    theta_enc = create_branch(M_ENC, dims, vocab, rng)
    theta_dec = create_branch(M_DEC, dims, vocab, rng)
    store.put(theta_enc)
    store.put(theta_dec)
    for c in centers:
        store.put(theta_enc.clone(BranchId.e(c)))


def _keyed_rng(*keys: object) -> random.Random:
    material = "|".join(map(str, keys)).encode()
    return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:8], "little"))


class Trainer:
    def __init__(
        self,
        plan: TrainingPlan,
        store: BranchStore,
        vocab: Vocabulary,
        shards: Sequence[Shard],
        state_dir: str | Path | None = None,
        log_path: str | Path | None = None,
    ):
        self.plan = plan
        self.store = store
        self.vocab = vocab
        self.shards = {(s.center_language, s.shard_id): s for s in shards}
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.log_path = Path(log_path) if log_path is not None else None
        self.opt: dict[str, tc.AdamState] = {}
        self.completed = 0
        self.decoders_initialized = False
        self.steps = 0
        self.logs: list[StepLog] = []
        self.peak_bytes = 0
        self._lengths: dict[tuple[str, str], int] = {}
        if self.state_dir is not None and (self.state_dir / "progress.json").exists():
            self._restore()

    # -- optimizer bookkeeping --

    def _adam(self, key: str) -> tc.AdamState:
        if key not in self.opt:
            p = self.plan
            self.opt[key] = tc.AdamState(lr=p.lr, beta1=p.beta1, beta2=p.beta2, eps=p.eps)
        return self.opt[key]

    def _update(self, key: str, bids: Sequence[BranchId]) -> None:
        params = [p for b in bids for p in self.store.resident[b].parameters() if p.grad is not None]
        if params:
            tc.adam_step(params, self._adam(key))
        for b in bids:
            self.store.mark_dirty(b)

    def _require(self, bids: Sequence[BranchId]) -> dict:
        missing = [str(b) for b in bids if b not in self.store.resident]
        if missing:
            raise MissingBranch(f"not resident: {', '.join(missing)}")
        return self.store.resident

    def _tokens(self, pairs: Sequence[ParallelPair]) -> int:
        return sum(self._len(p.src_lang, p.src_text) + self._len(p.tgt_lang, p.tgt_text) for p in pairs)

    def _len(self, lang: str, text: str) -> int:
        key = (lang, text)
        if key not in self._lengths:
            self._lengths[key] = len(encode(text, lang, self.vocab))
        return self._lengths[key]

    def _record(self, entry: StepLog) -> StepLog:
        self.steps += 1
        entry.step = self.steps
        self.logs.append(entry)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        return entry

    # -- steps --

    def stage1_step(self, center: str, enc_batch: Sequence[ParallelPair], mix_batch: Sequence[ParallelPair], shard_id: int | None = None) -> StepLog:
        """Enc-Flow on ``enc_batch`` and Mix-Flow on ``mix_batch``, then one update of theta_m and theta_e."""
        e_id = BranchId.e(center)
        branches = self._require([M_ENC, M_DEC, e_id])
        for p in enc_batch:
            if p.src_lang != center:
                raise FlowDataMismatch(f"Enc-Flow batch for {center} holds a {p.src_lang}->{p.tgt_lang} pair")
        start = time.perf_counter()
        losses = {}
        with tc.Tape() as tape:
            l_e = flow_loss(FlowSpec.enc(center), enc_batch, self.vocab, branches)
        tc.backward(l_e, tape)
        losses["l_e"] = l_e.item()
        if mix_batch:
            with tc.Tape() as tape:
                l_m = flow_loss(FlowSpec.mix(), mix_batch, self.vocab, branches)
            tc.backward(l_m, tape)
            losses["l_m"] = l_m.item()
        self._update("theta_m", [M_ENC, M_DEC])
        self._update(str(e_id), [e_id])
        return self._record(
            StepLog(STAGE1, "Enc+Mix", shard_id, center, losses, self._tokens(enc_batch) + self._tokens(mix_batch), time.perf_counter() - start)
        )

    def stage2_step(self, center: str, dec_batch: Sequence[ParallelPair], shard_id: int | None = None) -> StepLog:
        """Dec-Flow with the multilingual encoder frozen; only theta_d(center) moves."""
        d_id = BranchId.d(center)
        branches = self._require([M_ENC, d_id])
        for p in dec_batch:
            if p.tgt_lang != center:
                raise FlowDataMismatch(f"Dec-Flow batch for {center} holds a {p.src_lang}->{p.tgt_lang} pair")
        start = time.perf_counter()
        with tc.Tape() as tape:
            l_d = flow_loss(FlowSpec.dec(center), dec_batch, self.vocab, branches, frozen_encoder=True)
        tc.backward(l_d, tape)
        assert all(p.grad is None for p in branches[M_ENC].parameters())
        self._update(str(d_id), [d_id])
        return self._record(StepLog(STAGE2, "Dec", shard_id, center, {"l_d": l_d.item()}, self._tokens(dec_batch), time.perf_counter() - start))

    def joint_dec_mix_step(self, center: str, dec_batch: Sequence[ParallelPair], mix_batch: Sequence[ParallelPair]) -> StepLog:
        """Ablation: Dec-Flow trained jointly with Mix-Flow, so l_d also reaches the multilingual encoder."""
        d_id = BranchId.d(center)
        branches = self._require([M_ENC, M_DEC, d_id])
        start = time.perf_counter()
        losses = {}
        with tc.Tape() as tape:
            l_d = flow_loss(FlowSpec.dec(center), dec_batch, self.vocab, branches)
        tc.backward(l_d, tape)
        losses["l_d"] = l_d.item()
        if mix_batch:
            with tc.Tape() as tape:
                l_m = flow_loss(FlowSpec.mix(), mix_batch, self.vocab, branches)
            tc.backward(l_m, tape)
            losses["l_m"] = l_m.item()
        self._update("theta_m", [M_ENC, M_DEC])
        self._update(str(d_id), [d_id])
        return self._record(
            StepLog("joint", "Dec+Mix", None, center, losses, self._tokens(dec_batch) + self._tokens(mix_batch), time.perf_counter() - start)
        )

    # -- schedule --

    def batches(self, pairs: Sequence[ParallelPair], rng: random.Random) -> list[list[ParallelPair]]:
        """Shuffle, then pack greedily so that rows x longest sequence stays within the token budget."""
        order = list(pairs)
        rng.shuffle(order)
        out, cur, longest = [], [], 0
        for p in order:
            n = max(self._len(p.src_lang, p.src_text), self._len(p.tgt_lang, p.tgt_text))
            if cur and (len(cur) + 1) * max(longest, n) > self.plan.token_budget:
                out.append(cur)
                cur, longest = [], 0
            cur.append(p)
            longest = max(longest, n)
        if cur:
            out.append(cur)
        return out

    def initialize_decoders(self) -> None:
        """theta_d = theta_m: every center's decoder starts as a copy of the trained multilingual decoder."""
        m_dec = self.store.acquire([M_DEC])[M_DEC]
        for c in self.plan.centers:
            self.store.put(m_dec.clone(BranchId.d(c)))
        self.decoders_initialized = True

    def _residents_for(self, stage: str, center: str) -> list[BranchId]:
        specific = BranchId.e(center) if stage == STAGE1 else BranchId.d(center)
        return [M_ENC, M_DEC, specific]

    def _run_unit(self, index: int, units: list[tuple[str, str, int, int]]) -> None:
        stage, center, epoch, sid = units[index]
        if stage == STAGE2 and not self.decoders_initialized:
            self.initialize_decoders()
        self.store.acquire(self._residents_for(stage, center))
        if self.plan.prefetch and index + 1 < len(units):
            self.store.prefetch(self._residents_for(*units[index + 1][:2])[-1])
        self.peak_bytes = max(self.peak_bytes, self.store.ledger.peak_bytes)

        shard = self.shards.get((center, sid))
        if shard is None:
            log.warning("no shard %d for %s; skipping", sid, center)
            return
        rng = _keyed_rng(self.plan.seed, stage, center, epoch, sid)
        if stage == STAGE1:
            enc_batches = self.batches(shard.one_to_many, rng)
            mix_batches = self.batches(shard.multilingual_sample, rng)
            for i, batch in enumerate(enc_batches):
                mix = mix_batches[i % len(mix_batches)] if mix_batches else []
                self.stage1_step(center, batch, mix, sid)
        else:
            for batch in self.batches(shard.many_to_one, rng):
                self.stage2_step(center, batch, sid)
        self.peak_bytes = max(self.peak_bytes, self.store.ledger.peak_bytes)

    def run(self, stop_after: int | None = None) -> list[StepLog]:
        """Run the remaining schedule; ``stop_after`` ends early after that many shard passes (resumable)."""
        needed = [M_ENC, M_DEC] + [BranchId.e(c) for c in self.plan.centers]
        missing = [str(b) for b in needed if not self.store.has(b)]
        if missing:
            raise MissingBranch(f"store lacks {', '.join(missing)}; initialize it first")
        units = self.plan.units()
        done_now = 0
        while self.completed < len(units):
            if stop_after is not None and done_now >= stop_after:
                break
            try:
                self._run_unit(self.completed, units)
            except Exception as exc:
                self.store.discard()
                raise TrainingAborted(f"unit {self.completed} {units[self.completed]} failed; resume from the last checkpoint") from exc
            self.completed += 1
            done_now += 1
            self.checkpoint()
        if self.completed == len(units):
            self.store.flush()
        return self.logs

    @property
    def finished(self) -> bool:
        return self.completed == len(self.plan.units())

    # -- persistence --

    def checkpoint(self) -> None:
        self.store.flush()
        if self.state_dir is None:
            return
        opt_dir = self.state_dir / "opt"
        opt_dir.mkdir(parents=True, exist_ok=True)
        hyper = {}
        for key, state in self.opt.items():
            fname = key.replace(":", "_")
            np.savez(opt_dir / f"{fname}.npz", **state.to_arrays())
            hyper[key] = {"file": f"{fname}.npz", **state.hyper()}
        progress = {
            "plan_digest": self.plan.digest(),
            "completed_units": self.completed,
            "decoders_initialized": self.decoders_initialized,
            "steps": self.steps,
            "peak_bytes": self.peak_bytes,
            "optimizers": hyper,
        }
        tmp = self.state_dir / "progress.json.tmp"
        tmp.write_text(json.dumps(progress, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.state_dir / "progress.json")

    def _restore(self) -> None:
        progress = json.loads((self.state_dir / "progress.json").read_text())
        if progress["plan_digest"] != self.plan.digest():
            raise PlanMismatch(f"state in {self.state_dir} belongs to plan {progress['plan_digest']}, not {self.plan.digest()}")
        self.completed = progress["completed_units"]
        self.decoders_initialized = progress["decoders_initialized"]
        self.steps = progress["steps"]
        self.peak_bytes = progress["peak_bytes"]
        for key, meta in progress["optimizers"].items():
            meta = dict(meta)
            fname = meta.pop("file")
            with np.load(self.state_dir / "opt" / fname) as arrays:
                self.opt[key] = tc.AdamState.from_arrays(meta, dict(arrays))


def run(
    plan: TrainingPlan,
    shards: Sequence[Shard],
    store: BranchStore,
    vocab: Vocabulary,
    state_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    stop_after: int | None = None,
) -> Trainer:
    trainer = Trainer(plan, store, vocab, shards, state_dir, log_path)
    trainer.run(stop_after)
    return trainer


@dataclass
class TrainConfig:
    """JSON training config: model dims, plan fields, and paths."""

    dims: Dims = field(default_factory=Dims)
    plan: TrainingPlan | None = None
    shards: str = "corpus/shards"
    vocab: str = "vocab.json"
    store: str = "store"
    state: str = "state"
    log: str = "steps.jsonl"

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        raw = json.loads(path.read_text())
        base = path.parent
        paths = {k: str((base / v).resolve()) for k, v in raw.get("paths", {}).items()}
        return cls(dims=Dims(**raw.get("dims", {})), plan=TrainingPlan(**raw["plan"]), **paths)
