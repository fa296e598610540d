"""Command-line interface.

Every command prints one JSON document on stdout; human-readable text and
logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Iterable

from . import corpus, metric, synth
from .branches import BranchId, Dims, FlowSpec, translate_batch
from .errors import LegoError, MissingBranch
from .registry import BranchStore, render_residency, residency_report
from .tokenizer import Vocabulary, train_bpe
from .trainer import TrainConfig, Trainer, initialize_store

log = logging.getLogger("legomt")

EXIT_CODES = """exit codes:
  0  success
  1  other library error
  2  usage error
  3  corpus error (EmptyText, SameLanguage, DirectionTooSmall)
  4  tokenizer error (VocabTooSmall, UnknownLanguageTag)
  5  LengthMismatch
  6  tensor error (ShapeMismatch, NonScalarLoss, MissingGrad)
  7  composition error (VocabMismatch, DimMismatch, MissingBranch, FlowDataMismatch)
  8  checkpoint error (CorruptCheckpoint, VersionMismatch, DigestMismatch)
  9  training error (TrainingAborted, PlanMismatch)
"""


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def say(text: str) -> None:
    print(text, file=sys.stderr)


# --- flow selection --------------------------------------------------------


def select_flow(
    center: str,
    resource_level: str,
    override: FlowSpec | None = None,
    available: Iterable[BranchId] | None = None,
) -> tuple[FlowSpec, str]:
    """Pick a flow for translating into ``center``; returns the flow and the reason."""
    if override is not None:
        spec, why = override, f"explicit override {override}"
    elif resource_level == "low":
        spec, why = FlowSpec.mix(), f"{center} is low-resource: Mix-Flow"
    elif resource_level == "high":
        spec, why = FlowSpec.dec(center), f"{center} is high-resource: Dec-Flow"
    else:
        raise ValueError(f"resource level must be high or low, got {resource_level!r}")
    if available is not None:
        have = set(available)
        missing = [str(b) for b in (spec.encoder, spec.decoder) if b not in have]
        if missing:
            log.warning("%s unavailable (%s); falling back to Mix-Flow", spec, ", ".join(missing))
            spec, why = FlowSpec.mix(), f"{why}; fell back to Mix-Flow because {', '.join(missing)} is missing"
    log.info("flow %s: %s", spec, why)
    return spec, why


def _override(args) -> FlowSpec | None:
    if args.enc is None and args.dec is None:
        return None
    if args.enc is None or args.dec is None:
        raise argparse.ArgumentTypeError("--enc and --dec go together")
    return FlowSpec.of(BranchId.parse(args.enc, "encoder"), BranchId.parse(args.dec, "decoder"))


# --- commands --------------------------------------------------------------


def cmd_synth_gen(args) -> dict:
    sizes = {}
    for item in args.size or []:
        key, _, n = item.partition("=")
        sizes[key] = int(n)
    spec = synth.SyntheticTaskSpec.default(args.langs, args.pairs, args.seed, sizes=sizes, lexicon_size=args.lexicon)
    out = synth.write(spec, args.out, args.bench)
    say(f"wrote {out['pairs']} pairs in {len(spec.languages)} languages to {args.out}")
    return out


def cmd_corpus_build(args) -> dict:
    centers = args.centers.split(",") if args.centers else sorted({p.src_lang for f in Path(args.input).glob("*.jsonl") for p in corpus.read_pairs(f)})
    summary = corpus.build(args.input, args.out, args.seed, args.shards, centers, args.benchmark)
    say(f"{summary['languages']} languages, {summary['clean']['removed']} pairs removed by cleaning, {len(summary['shards'])} shards")
    return summary


def cmd_tok_train(args) -> dict:
    texts, langs = set(), set()
    for path in args.corpus:
        for p in corpus.read_pairs(path):
            texts.update((p.src_text, p.tgt_text))
            langs.update((p.src_lang, p.tgt_lang))
    codes = args.langs.split(",") if args.langs else sorted(langs)
    vocab = train_bpe(sorted(texts), args.vocab_size, codes)
    vocab.save(args.out)
    say(f"vocabulary of {len(vocab)} tokens ({len(vocab.merges)} merges) -> {args.out}")
    return {"size": len(vocab), "merges": len(vocab.merges), "lang_codes": codes, "content_hash": vocab.content_hash}


def cmd_train_run(args) -> dict:
    cfg = TrainConfig.load(args.config)
    vocab = Vocabulary.load(cfg.vocab)
    store = BranchStore(cfg.store)
    if not store.ids():
        initialize_store(store, vocab, cfg.dims, cfg.plan.centers, cfg.plan.seed)
        say(f"initialized store {cfg.store} from seed {cfg.plan.seed}")
    shards = corpus.read_shards(cfg.shards)
    Path(cfg.log).parent.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg.plan, store, vocab, shards, cfg.state, cfg.log)
    trainer.run(args.stop_after)
    last = {}
    for entry in trainer.logs:
        last[entry.stage] = entry.losses
    say(f"{trainer.completed}/{len(cfg.plan.units())} shard passes done, {trainer.steps} steps")
    return {
        "plan_digest": cfg.plan.digest(),
        "completed_units": trainer.completed,
        "total_units": len(cfg.plan.units()),
        "finished": trainer.finished,
        "steps": trainer.steps,
        "last_losses": last,
        "peak_bytes": trainer.peak_bytes,
    }


def _open(args) -> tuple[BranchStore, Vocabulary]:
    return BranchStore(args.store), Vocabulary.load(args.vocab)


def cmd_translate(args) -> dict:
    store, vocab = _open(args)
    spec, why = select_flow(args.tgt_lg, args.resource_level, _override(args), store.ids())
    store.compose(spec.encoder, spec.decoder)
    sources = list(args.text or [])
    if args.input:
        sources += [line.rstrip("\n") for line in open(args.input, encoding="utf-8") if line.strip()]
    outs = translate_batch(spec, sources, args.src_lg, args.tgt_lg, vocab, store.resident, args.max_len, args.beam)
    for o in outs:
        say(o)
    return {"flow": str(spec), "rationale": why, "src_lg": args.src_lg, "tgt_lg": args.tgt_lg, "translations": outs}


def _eval_spec(kind: str, src: str, tgt: str, high: set[str], available) -> tuple[FlowSpec, str]:
    if kind == "mix":
        return FlowSpec.mix(), "requested Mix-Flow"
    if kind == "enc":
        return FlowSpec.enc(src), "requested Enc-Flow"
    if kind == "dec":
        return FlowSpec.dec(tgt), "requested Dec-Flow"
    return select_flow(tgt, "high" if tgt in high else "low", None, available)


def cmd_eval(args) -> dict:
    store, vocab = _open(args)
    groups = defaultdict(list)
    for p in corpus.read_pairs(args.data):
        groups[(p.src_lang, p.tgt_lang)].append(p)
    high = set(args.high.split(",")) if args.high else set()
    results, rows = {}, []
    for (src, tgt), pairs in sorted(groups.items()):
        pairs = pairs[: args.limit] if args.limit else pairs
        spec, why = _eval_spec(args.flow, src, tgt, high, store.ids())
        try:
            store.compose(spec.encoder, spec.decoder)
        except MissingBranch as exc:
            log.warning("skipping %s-%s: %s", src, tgt, exc)
            continue
        hyps = translate_batch(spec, [p.src_text for p in pairs], src, tgt, vocab, store.resident, args.max_len, args.beam)
        score = metric.spbleu(hyps, [p.tgt_text for p in pairs], vocab)
        results[(src, tgt)] = score
        rows.append({"direction": f"{src}-{tgt}", "flow": str(spec), "rationale": why, "segments": len(pairs), **score.to_json()})
    if not results:
        raise MissingBranch("no direction could be evaluated")
    centers = args.centers.split(",") if args.centers else sorted({lg for d in results for lg in d})
    table = metric.direction_table(results, centers)
    say(table["text"])
    return {"directions": rows, "table": {k: v for k, v in table.items() if k != "text"}}


def cmd_branch_ls(args) -> dict:
    store = BranchStore(args.store)
    out = [{"id": str(b), **store.info(b)} for b in store.ids()]
    for row in out:
        say(f"{row['id']:<12}{row['n_params']:>10} params  {row['file']}")
    return {"branches": out}


def cmd_branch_inspect(args) -> dict:
    store = BranchStore(args.store)
    bid = BranchId.parse(args.id)
    branch = store.load(bid)
    tensors = {name: list(a.shape) for name, a in branch.arrays().items()}
    say(f"{bid}: {branch.n_params} params, {len(tensors)} tensors, digest {branch.digest()}")
    return {"id": str(bid), **store.info(bid), "digest": branch.digest(), "tensors": tensors}


def cmd_branch_compose(args) -> dict:
    store = BranchStore(args.store)
    spec = store.compose(BranchId.parse(args.enc, "encoder"), BranchId.parse(args.dec, "decoder"))
    say(f"{spec}: resident {store.ledger.total_bytes} bytes")
    return {"flow": spec.flow.value, "encoder": str(spec.encoder), "decoder": str(spec.decoder), "resident_bytes": store.ledger.total_bytes}


def cmd_bench_residency(args) -> dict:
    dims = Dims(args.d_model, args.heads, args.layers)
    report = residency_report(args.k, args.workdir, dims, args.vocab_size, args.seed, args.tokens)
    say(render_residency(report))
    return report


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="legomt",
        description="Detachable multilingual translation branches: data, training, inference, benchmarks.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log INFO messages to stderr")
    sub = parser.add_subparsers(dest="group", required=True)

    def group(name, help_):
        g = sub.add_parser(name, help=help_, epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
        return g.add_subparsers(dest="command", required=True)

    def leaf(parent, name, fn, help_):
        p = parent.add_parser(name, help=help_, parents=[common], epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        return p

    def store_args(p, vocab=True):
        p.add_argument("--store", required=True, help="branch store directory")
        if vocab:
            p.add_argument("--vocab", required=True, help="vocabulary JSON")

    def decode_args(p):
        p.add_argument("--max-len", type=int, default=64)
        p.add_argument("--beam", type=int, default=None, help="beam width (greedy when omitted)")

    g = group("synth", "synthetic parallel data")
    p = leaf(g, "gen", cmd_synth_gen, "generate a cipher-language corpus")
    p.add_argument("--langs", type=int, default=4)
    p.add_argument("--pairs", type=int, default=2000, help="pairs per direction")
    p.add_argument("--size", action="append", metavar="SRC-TGT=N", help="per-direction size override")
    p.add_argument("--lexicon", type=int, default=40)
    p.add_argument("--bench", type=int, default=50, help="benchmark sentences per high-resource direction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    g = group("corpus", "corpus construction")
    p = leaf(g, "build", cmd_corpus_build, "unify, clean, split, and shard raw JSONL pairs")
    p.add_argument("--in", dest="input", required=True, help="directory of raw *.jsonl pair files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shards", type=int, default=4)
    p.add_argument("--centers", help="comma-separated center languages (default: every source language)")
    p.add_argument("--benchmark", help="JSONL pairs whose sentences are removed from train/dev")

    g = group("tok", "tokenizer")
    p = leaf(g, "train", cmd_tok_train, "train a byte-level BPE vocabulary")
    p.add_argument("--corpus", nargs="+", required=True, help="JSONL pair files")
    p.add_argument("--vocab-size", type=int, default=600)
    p.add_argument("--langs", help="comma-separated language codes (default: every code in the corpus)")
    p.add_argument("--out", required=True)

    g = group("train", "training")
    p = leaf(g, "run", cmd_train_run, "run (or resume) the two-stage schedule")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--stop-after", type=int, default=None, help="stop after N shard passes (resumable)")

    p = sub.add_parser("translate", help="translate text with a chosen or policy-selected flow", parents=[common], epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.set_defaults(fn=cmd_translate)
    store_args(p)
    p.add_argument("--enc", help="encoder branch: M, E:xx")
    p.add_argument("--dec", help="decoder branch: M, D:xx")
    p.add_argument("--resource-level", choices=("high", "low"), default="low", help="policy input when no --enc/--dec is given")
    p.add_argument("--src-lg", required=True)
    p.add_argument("--tgt-lg", required=True)
    p.add_argument("--text", action="append")
    p.add_argument("--input", help="file with one source sentence per line")
    decode_args(p)

    p = sub.add_parser("eval", help="spBLEU per direction and a center-language table", parents=[common], epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.set_defaults(fn=cmd_eval)
    store_args(p)
    p.add_argument("--data", required=True, help="JSONL pairs (e.g. split/test.jsonl)")
    p.add_argument("--flow", choices=("mix", "enc", "dec", "auto"), default="mix")
    p.add_argument("--high", help="comma-separated high-resource languages (for --flow auto)")
    p.add_argument("--centers", help="comma-separated table columns")
    p.add_argument("--limit", type=int, default=None, help="segments per direction")
    decode_args(p)

    g = group("branch", "branch store")
    p = leaf(g, "ls", cmd_branch_ls, "list branches")
    store_args(p, vocab=False)
    p = leaf(g, "inspect", cmd_branch_inspect, "show one branch")
    store_args(p, vocab=False)
    p.add_argument("id")
    p = leaf(g, "compose", cmd_branch_compose, "validate an encoder/decoder pairing")
    store_args(p, vocab=False)
    p.add_argument("--enc", required=True)
    p.add_argument("--dec", required=True)

    g = group("bench", "benchmarks")
    p = leaf(g, "residency", cmd_bench_residency, "loaded bytes: multi-way vs detachable branches")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--workdir", required=True)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--tokens", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        emit(args.fn(args))
    except LegoError as exc:
        say(f"error: {type(exc).__name__}: {exc}")
        return exc.exit_code
    except (argparse.ArgumentTypeError, ValueError) as exc:
        say(f"usage error: {exc}")
        parser.print_usage(sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
