"""Command-line entry point: ``samkv <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import Corpus, generate_corpus
from .engine import prefill_document, save_weights
from .errors import InputError, SamKVError
from .kv_store import load_cache, save_cache
from .pipeline import (
    PipelineError,
    analyze_layers,
    canonical_json,
    compare_runs,
    load_config,
    resolve_corpus,
    resolve_model,
    run_pipeline,
    write_report,
)

log = logging.getLogger("samkv")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--mode", choices=["samkv", "full_recompute", "reuse_only", "initial_local_only"])
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=float, help="recompute budget as a fraction of all tokens")
    p.add_argument("--policy", choices=["overwrite", "fusion"])
    p.add_argument("--block-size", type=int)
    p.add_argument("--corpus", help="corpus JSON written by gen-corpus")
    p.add_argument("--model", help="weights file written by dump-cache --weights")
    p.add_argument("--force-p", type=float)
    p.add_argument("--stable-layers", help="'auto' or comma-separated layer indices")
    p.add_argument("--report", help="write the JSON report here instead of stdout")


def _overrides(ns: argparse.Namespace) -> dict:
    return {
        "mode": ns.mode,
        "seed": ns.seed,
        "recompute_budget": ns.budget,
        "policy": ns.policy,
        "block_size": ns.block_size,
        "corpus_path": ns.corpus,
        "model_path": ns.model,
        "force_p": ns.force_p,
        "stable_layers": ns.stable_layers,
        "output": ns.report,
    }


def _emit(data: dict, path: str | None) -> None:
    if path:
        write_report(data, path)
        log.info("wrote %s", path)
    else:
        sys.stdout.write(canonical_json(data) + "\n")


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read report {path}: {exc}", stage="compare") from exc


def cmd_gen_corpus(ns: argparse.Namespace) -> None:
    corpus = generate_corpus(
        ns.seed, ns.docs, ns.doc_len, ns.overlap, vocab_size=ns.vocab_size, query_len=ns.query_len
    )
    corpus.save(ns.out)
    print(f"{ns.out}: {ns.docs} docs x {ns.doc_len} tokens, fingerprint {corpus.fingerprint()}")


def cmd_run(ns: argparse.Namespace) -> None:
    cfg = load_config(ns.config, _overrides(ns))
    report = run_pipeline(cfg)
    _emit(report, cfg.output)


def cmd_compare(ns: argparse.Namespace) -> None:
    _emit(compare_runs(_read_json(ns.report_a), _read_json(ns.report_b)), ns.report)


def cmd_analyze_layers(ns: argparse.Namespace) -> None:
    cfg = load_config(ns.config, _overrides(ns))
    _emit(analyze_layers(cfg), cfg.output)


def cmd_dump_cache(ns: argparse.Namespace) -> None:
    if ns.inspect:
        cache = load_cache(ns.inspect)
        summary = {
            "doc_id": cache.doc_id,
            "generation": cache.generation.value,
            "layers": cache.num_layers,
            "heads": int(cache.k.shape[1]),
            "tokens": cache.num_tokens,
            "head_dim": int(cache.k.shape[3]),
            "has_q": cache.q is not None,
            "blocks": [
                {"index": b.block_index, "start": b.start, "end": b.end, "role": b.role.value}
                for b in cache.blocks
            ],
        }
        print(json.dumps(summary, indent=2))
        return
    if not ns.out:
        raise InputError("dump-cache needs --out or --inspect", stage="cli")
    cfg = load_config(ns.config, _overrides(ns))
    weights = resolve_model(cfg)
    corpus: Corpus = resolve_corpus(cfg, weights.spec.vocab_size)
    if not 0 <= ns.doc < len(corpus.docs):
        raise InputError(f"document index {ns.doc} outside [0, {len(corpus.docs)})", stage="cli")
    cache = prefill_document(
        weights,
        np.asarray(corpus.docs[ns.doc]),
        f"doc{ns.doc}",
        block_size=cfg.block_size,
        n_initial=cfg.n_initial,
        n_local=cfg.n_local,
        retain_q=ns.with_q,
    )
    save_cache(cache, ns.out)
    print(f"{ns.out}: {cache.doc_id}, {cache.num_tokens} tokens, {len(cache.blocks)} blocks")
    if ns.weights:
        save_weights(weights, ns.weights)
        print(f"{ns.weights}: checksum {weights.checksum()[:16]}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samkv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a seeded synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--docs", type=int, default=3)
    p.add_argument("--doc-len", type=int, default=1600)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--query-len", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("run", help="run the pipeline and emit a report")
    _config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="diff two run reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--report")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze-layers", help="per-block attributes and stable layers")
    _config_args(p)
    p.set_defaults(func=cmd_analyze_layers)

    p = sub.add_parser("dump-cache", help="write or inspect a document cache file")
    _config_args(p)
    p.add_argument("--doc", type=int, default=0, help="document index to prefill")
    p.add_argument("--out", help="cache file to write")
    p.add_argument("--with-q", action="store_true", help="retain Q in the cache")
    p.add_argument("--weights", help="also write the model weights here")
    p.add_argument("--inspect", help="print a summary of an existing cache file")
    p.set_defaults(func=cmd_dump_cache)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        ns.func(ns)
    except PipelineError as exc:
        print(f"samkv {ns.command}: {exc}", file=sys.stderr)
        return 1
    except SamKVError as exc:
        print(f"samkv {ns.command}: [{exc.stage}] {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"samkv {ns.command}: [io] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
