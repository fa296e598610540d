"""Many-to-many corpus construction.

Stages, each a pure function over manifests:

    unify_pair -> merge -> clean -> split -> filter_benchmark_overlap -> shard

`build` chains them over a directory of raw JSONL pair files and writes the
resulting splits and language-centric shards back out as JSONL.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

from .errors import DirectionTooSmall, EmptyText, SameLanguage

log = logging.getLogger(__name__)

MAX_UNITS = 250
MAX_RATIO = 3.0
SPLIT_THRESHOLD = 6000
HELDOUT_SIZE = 2000
MIN_SPLITTABLE = 10
CHAR_SEGMENTED = frozenset({"zh", "zhtrad", "ja"})

_REGION = re.compile(r"^([A-Za-z]{2,3})[_-]([A-Za-z]{2}|[0-9]{3})$")
_WS = re.compile(r"\s+")
_CJK = (
    "⺀-⿟"  # radicals
    "　-〿"  # CJK symbols and punctuation
    "぀-ヿ"  # hiragana, katakana
    "ㇰ-ㇿ"
    "㐀-䶿"
    "一-鿿"
    "豈-﫿"
    "＀-￯"  # full/half-width forms
)
_CJK_GAP = re.compile(f"(?<=[{_CJK}]) (?=[{_CJK}])")

Direction = tuple[str, str]


@lru_cache(maxsize=1)
def code_tables() -> dict:
    """Replacement and unknown-code tables shipped in ``data/lang_codes.json``."""
    text = resources.files("legomt").joinpath("data/lang_codes.json").read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class LanguageCode:
    raw: str
    normalized: str
    unknown: bool = False


def normalize_code(raw: str) -> LanguageCode:
    tables = code_tables()
    code = raw.strip()
    for candidate in (code, code.lower()):
        if candidate in tables["replacements"]:
            return LanguageCode(raw, tables["replacements"][candidate])
    m = _REGION.match(code)
    if m:
        code = m.group(1)
    code = code.lower()
    # a stripped or lowercased form may itself be a listed ISO 639-2/3 code
    if code in tables["replacements"]:
        return LanguageCode(raw, tables["replacements"][code])
    if code in tables["unknown"]:
        log.warning("language code %r is outside ISO 639; kept verbatim", raw)
        return LanguageCode(raw, code, unknown=True)
    return LanguageCode(raw, code)


@dataclass(frozen=True)
class ParallelPair:
    src_lang: str
    tgt_lang: str
    src_text: str
    tgt_text: str
    origin: str = ""

    @property
    def direction(self) -> Direction:
        return (self.src_lang, self.tgt_lang)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ParallelPair":
        return cls(obj["src_lang"], obj["tgt_lang"], obj["src_text"], obj["tgt_text"], obj.get("origin", ""))


def detokenize(text: str, lang: str) -> str:
    text = _WS.sub(" ", text).strip()
    if lang in CHAR_SEGMENTED:
        text = _CJK_GAP.sub("", text)
    return text


def unify_pair(pair: ParallelPair) -> ParallelPair:
    src = normalize_code(pair.src_lang).normalized
    tgt = normalize_code(pair.tgt_lang).normalized
    if src == tgt:
        raise SameLanguage(f"{pair.src_lang}->{pair.tgt_lang} normalizes to one language {src!r}")
    src_text = detokenize(pair.src_text, src)
    tgt_text = detokenize(pair.tgt_text, tgt)
    if not src_text or not tgt_text:
        raise EmptyText(f"empty side after unification ({src}->{tgt}, origin {pair.origin!r})")
    return ParallelPair(src, tgt, src_text, tgt_text, pair.origin)


@dataclass
class CorpusManifest:
    pairs: list[ParallelPair] = field(default_factory=list)

    @property
    def direction_index(self) -> dict[Direction, int]:
        return dict(Counter(p.direction for p in self.pairs))

    @property
    def language_count(self) -> int:
        return len({p.src_lang for p in self.pairs} | {p.tgt_lang for p in self.pairs})

    def by_direction(self) -> dict[Direction, list[ParallelPair]]:
        groups: dict[Direction, list[ParallelPair]] = defaultdict(list)
        for p in self.pairs:
            groups[p.direction].append(p)
        return {d: groups[d] for d in sorted(groups)}

    def __len__(self) -> int:
        return len(self.pairs)


def merge(manifests: Iterable[CorpusManifest]) -> CorpusManifest:
    """Pool pairs sharing a normalized direction; output is grouped by sorted direction."""
    pooled = CorpusManifest([p for m in manifests for p in m.pairs])
    return CorpusManifest([p for group in pooled.by_direction().values() for p in group])


def segment_units(text: str, lang: str) -> int:
    if lang in CHAR_SEGMENTED:
        return sum(1 for ch in text if not ch.isspace())
    return len(text.split())


@dataclass
class CleanReport:
    input_pairs: int = 0
    kept: int = 0
    duplicate: int = 0
    missing_translation: int = 0
    too_long: int = 0
    length_ratio: int = 0
    per_direction: dict[str, dict[str, int]] = field(default_factory=dict)

    RULES = ("duplicate", "missing_translation", "too_long", "length_ratio")

    @property
    def removed(self) -> int:
        return sum(getattr(self, r) for r in self.RULES)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in ("input_pairs", "kept", *self.RULES)}
        out["removed"] = self.removed
        out["per_direction"] = self.per_direction
        return out


def clean(manifest: CorpusManifest) -> tuple[CorpusManifest, CleanReport]:
    report = CleanReport(input_pairs=len(manifest))
    kept: list[ParallelPair] = []
    for (src, tgt), group in manifest.by_direction().items():
        counts = dict.fromkeys(CleanReport.RULES, 0)
        seen: set[tuple[str, str]] = set()
        for p in group:
            key = (p.src_text, p.tgt_text)
            if key in seen:
                counts["duplicate"] += 1
                continue
            seen.add(key)
            if not p.src_text or not p.tgt_text or p.src_text == p.tgt_text:
                counts["missing_translation"] += 1
                continue
            n_src = segment_units(p.src_text, src)
            n_tgt = segment_units(p.tgt_text, tgt)
            if n_src > MAX_UNITS or n_tgt > MAX_UNITS:
                counts["too_long"] += 1
                continue
            lo, hi = min(n_src, n_tgt), max(n_src, n_tgt)
            if lo >= 1 and hi / lo > MAX_RATIO:
                counts["length_ratio"] += 1
                continue
            kept.append(p)
        for rule, n in counts.items():
            setattr(report, rule, getattr(report, rule) + n)
        counts["kept"] = len(group) - sum(counts.values())
        report.per_direction[f"{src}-{tgt}"] = counts
    report.kept = len(kept)
    return CorpusManifest(kept), report


def _rng(seed: int, *keys: object) -> random.Random:
    material = "|".join(str(k) for k in (seed, *keys)).encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:8], "little"))


@dataclass
class DirectionSplit:
    train: list[ParallelPair] = field(default_factory=list)
    dev: list[ParallelPair] = field(default_factory=list)
    test: list[ParallelPair] = field(default_factory=list)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.dev), len(self.test)


@dataclass
class SplitAssignment:
    directions: dict[Direction, DirectionSplit]
    seed: int
    flagged: list[Direction] = field(default_factory=list)

    def part(self, name: str) -> list[ParallelPair]:
        return [p for d in sorted(self.directions) for p in getattr(self.directions[d], name)]


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, dev, test) sizes for a direction holding ``n`` pairs."""
    if n > SPLIT_THRESHOLD:
        return n - 2 * HELDOUT_SIZE, HELDOUT_SIZE, HELDOUT_SIZE
    if n < MIN_SPLITTABLE:
        return n, 0, 0
    held = n // 10
    return n - 2 * held, held, held


def split(manifest: CorpusManifest, seed: int, strict: bool = False) -> SplitAssignment:
    result = SplitAssignment({}, seed)
    for direction, group in manifest.by_direction().items():
        n = len(group)
        if n < MIN_SPLITTABLE:
            if strict:
                raise DirectionTooSmall(f"{direction[0]}-{direction[1]} has {n} pairs")
            log.warning("direction %s-%s has only %d pairs; all assigned to train", *direction, n)
            result.flagged.append(direction)
        _, n_dev, n_test = split_counts(n)
        order = list(range(n))
        _rng(seed, "split", *direction).shuffle(order)
        dev = sorted(order[:n_dev])
        test = sorted(order[n_dev : n_dev + n_test])
        train = sorted(order[n_dev + n_test :])
        result.directions[direction] = DirectionSplit(
            [group[i] for i in train], [group[i] for i in dev], [group[i] for i in test]
        )
    return result


def filter_benchmark_overlap(assignment: SplitAssignment, benchmark: Iterable[ParallelPair]) -> SplitAssignment:
    """Drop train/dev pairs sharing either side's text with any benchmark sentence."""
    banned = {t for p in benchmark for t in (p.src_text, p.tgt_text)}

    def keep(pairs: list[ParallelPair]) -> list[ParallelPair]:
        return [p for p in pairs if p.src_text not in banned and p.tgt_text not in banned]

    return SplitAssignment(
        {d: DirectionSplit(keep(s.train), keep(s.dev), list(s.test)) for d, s in assignment.directions.items()},
        assignment.seed,
        list(assignment.flagged),
    )


@dataclass
class Shard:
    shard_id: int
    center_language: str
    one_to_many: list[ParallelPair] = field(default_factory=list)
    many_to_one: list[ParallelPair] = field(default_factory=list)
    multilingual_sample: list[ParallelPair] = field(default_factory=list)


def _round_robin(pairs: list[ParallelPair], shard_count: int, rng: random.Random) -> list[list[ParallelPair]]:
    order = list(pairs)
    rng.shuffle(order)
    return [order[i::shard_count] for i in range(shard_count)]


def shard(
    assignment: SplitAssignment,
    center_languages: list[str],
    shard_count: int,
    seed: int,
    mix_size: int | None = None,
) -> list[Shard]:
    """Language-centric shards.

    ``mix_size`` is the multilingual sample size per shard; by default it
    matches the shard's own group size (one Mix batch per Enc/Dec batch).
    """
    if shard_count < 1:
        raise ValueError("shard_count must be >= 1")
    if not center_languages:
        raise ValueError("center_languages is empty")
    train_dirs = {d: s.train for d, s in sorted(assignment.directions.items()) if s.train}
    shards = []
    for center in center_languages:
        out_pairs = [p for (s, _), ps in train_dirs.items() if s == center for p in ps]
        in_pairs = [p for (_, t), ps in train_dirs.items() if t == center for p in ps]
        o2m = _round_robin(out_pairs, shard_count, _rng(seed, "o2m", center))
        m2o = _round_robin(in_pairs, shard_count, _rng(seed, "m2o", center))
        for i in range(shard_count):
            size = len(o2m[i]) + len(m2o[i]) if mix_size is None else mix_size
            rng = _rng(seed, "mix", center, i)
            sample = []
            if train_dirs:
                dirs = list(train_dirs)
                for _ in range(size):
                    pool = train_dirs[dirs[rng.randrange(len(dirs))]]
                    sample.append(pool[rng.randrange(len(pool))])
            shards.append(Shard(i, center, o2m[i], m2o[i], sample))
    return shards


# --- JSONL I/O -------------------------------------------------------------


def read_pairs(path: str | Path) -> list[ParallelPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                pairs.append(ParallelPair.from_json(json.loads(line)))
    return pairs


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


SHARD_GROUPS = ("one_to_many", "many_to_one", "multilingual_sample")


def shard_records(s: Shard):
    for group in SHARD_GROUPS:
        for p in getattr(s, group):
            yield {**p.to_json(), "split": "train", "shard_id": s.shard_id, "center": s.center_language, "group": group}


def read_shards(directory: str | Path) -> list[Shard]:
    shards: dict[tuple[str, int], Shard] = {}
    for path in sorted(Path(directory).glob("*.jsonl")):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                key = (obj["center"], obj["shard_id"])
                s = shards.setdefault(key, Shard(obj["shard_id"], obj["center"]))
                getattr(s, obj["group"]).append(ParallelPair.from_json(obj))
    return [shards[k] for k in sorted(shards)]


def build(
    in_dir: str | Path,
    out_dir: str | Path,
    seed: int,
    shard_count: int,
    centers: list[str],
    benchmark: str | Path | None = None,
) -> dict:
    """Run the full pipeline over ``in_dir/*.jsonl``; returns a JSON summary."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    manifests = []
    rejected = Counter()
    for path in sorted(in_dir.glob("*.jsonl")):
        pairs = []
        for raw in read_pairs(path):
            try:
                pairs.append(unify_pair(raw))
            except (EmptyText, SameLanguage) as exc:
                rejected[type(exc).__name__] += 1
        manifests.append(CorpusManifest(pairs))
    merged = merge(manifests)
    cleaned, report = clean(merged)
    assignment = split(cleaned, seed)
    if benchmark is not None:
        bench = []
        for raw in read_pairs(benchmark):
            try:
                bench.append(unify_pair(raw))
            except (EmptyText, SameLanguage):
                continue
        assignment = filter_benchmark_overlap(assignment, bench)
    centers = [normalize_code(c).normalized for c in centers]
    shards = shard(assignment, centers, shard_count, seed)

    for part in ("train", "dev", "test"):
        write_jsonl(out_dir / "split" / f"{part}.jsonl", ({**p.to_json(), "split": part} for p in assignment.part(part)))
    for s in shards:
        write_jsonl(out_dir / "shards" / f"{s.center_language}_{s.shard_id:03d}.jsonl", shard_records(s))
    summary = {
        "seed": seed,
        "languages": cleaned.language_count,
        "unify_rejected": dict(sorted(rejected.items())),
        "clean": report.to_json(),
        "split": {
            f"{s}-{t}": dict(zip(("train", "dev", "test"), d.sizes())) for (s, t), d in sorted(assignment.directions.items())
        },
        "flagged": [f"{s}-{t}" for s, t in assignment.flagged],
        "shards": [
            {"center": s.center_language, "shard_id": s.shard_id, **{g: len(getattr(s, g)) for g in SHARD_GROUPS}}
            for s in shards
        ],
    }
    (out_dir / "clean_report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
