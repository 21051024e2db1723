"""Command-line surface: corpus generation, training, synthesis, benchmarks.

Logging level comes from BRIDGE_LOG (error|info|debug, default info). Every
command exits nonzero with a structured JSON error on stderr for invalid
input, and outputs are written atomically (no partial files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import kernels
from .bench import bench_report, bench_rtf
from .config import Config, load_config
from .errors import BridgeError
from .features import corpus_digest, generate_corpus, read_corpus, write_corpus
from .metrics import JsonlLogger, MetricsReport
from .oracle_suite import run_suite
from .sparse_bridge import DOWNSAMPLE
from .training import (
    eval_bridge,
    load_ar_checkpoint,
    load_bridge_checkpoint,
    run_ablation,
    split_utts,
    synthesize,
    train_ar,
    train_bridge,
)

log = logging.getLogger("bridgecodec")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("BRIDGE_LOG", "info").lower(), logging.INFO
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(
            cfg,
            corpus=replace(cfg.corpus, seed=args.seed),
            train=replace(cfg.train, seed=args.seed),
        )
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_corpus(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    utts = generate_corpus(cfg.corpus.to_spec())
    manifest = write_corpus(utts, out)
    digest = corpus_digest(manifest)
    log.info("wrote %d utterances to %s (digest %s)", len(utts), out, digest[:16])
    print(json.dumps({"manifest": str(manifest), "n_utterances": len(utts), "digest": digest}))
    return 0


def _corpus_for(cfg: Config, args):
    manifest = getattr(args, "manifest", None)
    if manifest:
        return read_corpus(manifest)
    return generate_corpus(cfg.corpus.to_spec())


def cmd_train_bridge(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    corpus = _corpus_for(cfg, args)
    with JsonlLogger(out / "bridge_log.jsonl") as jl:
        sparse, dense, ckpt, history = train_bridge(cfg, corpus, out, steps=args.steps, logger=jl)
    ev = eval_bridge(sparse, dense, split_utts(corpus, "dev"))
    report = MetricsReport(
        token_rate_hz=cfg.corpus.frame_rate_hz / DOWNSAMPLE,
        ar_steps_per_second_of_speech=cfg.corpus.frame_rate_hz / DOWNSAMPLE,
        reconstruction_mse=ev["roundtrip_mse"],
        curves={k: v for k, v in history.items()},
    )
    report.write(out / "bridge_metrics.json")
    log.info("bridge checkpoint at %s, dev roundtrip MSE %.5f", ckpt, ev["roundtrip_mse"])
    print(json.dumps({"checkpoint": str(ckpt), "dev_roundtrip_mse": ev["roundtrip_mse"]}))
    return 0


def cmd_train_ar(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    corpus = _corpus_for(cfg, args)
    sparse, dense, _, _, _ = load_bridge_checkpoint(args.bridge_checkpoint, cfg)
    with JsonlLogger(out / "ar_log.jsonl") as jl:
        model, vocab, ckpt, history = train_ar(cfg, corpus, sparse, dense, out,
                                               steps=args.steps, logger=jl)
    report = MetricsReport(
        token_rate_hz=cfg.corpus.frame_rate_hz / DOWNSAMPLE,
        ar_steps_per_second_of_speech=cfg.corpus.frame_rate_hz / DOWNSAMPLE,
        token_accuracy=history["token_accuracy"][-1],
        curves={k: v for k, v in history.items()},
    )
    report.write(out / "ar_metrics.json")
    log.info("generator checkpoint at %s, final teacher-forced accuracy %.3f",
             ckpt, history["token_accuracy"][-1])
    print(json.dumps({"checkpoint": str(ckpt), "token_accuracy": history["token_accuracy"][-1]}))
    return 0


def cmd_synthesize(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    sparse, dense, _, bridge_hash, _ = load_bridge_checkpoint(args.bridge_checkpoint, cfg)
    model, vocab, _, _, meta = load_ar_checkpoint(args.ar_checkpoint, cfg)
    if meta.get("bridge_config_hash") != bridge_hash:
        raise BridgeError(
            "checkpoint lineage mismatch: generator was trained against a different bridge config"
        )
    corpus = _corpus_for(cfg, args)
    by_id = {u.utterance_id: u for u in corpus}
    if args.reference not in by_id:
        raise BridgeError(f"reference utterance {args.reference!r} not found in corpus")
    ref = by_id[args.reference]
    session = synthesize(model, dense, sparse, vocab, ref, args.text, cfg,
                         max_steps=args.max_steps,
                         out_features=out / "synthesized.brgf",
                         out_transcript=out / "transcript.jsonl")
    log.info("synthesized %d frames in %d steps", session.generated.shape[0], session.steps)
    print(json.dumps({"features": str(out / "synthesized.brgf"),
                      "transcript": str(out / "transcript.jsonl"),
                      "steps": session.steps, "frames": int(session.generated.shape[0])}))
    return 0


def cmd_bench_rtf(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    sparse, dense, _, _, _ = load_bridge_checkpoint(args.bridge_checkpoint, cfg)
    model, _, _, _, _ = load_ar_checkpoint(args.ar_checkpoint, cfg)
    corpus = _corpus_for(cfg, args)
    ref = split_utts(corpus, "dev")[0]
    raw = bench_rtf(cfg, sparse, dense, model, ref, seconds=args.seconds, runs=args.runs)
    report = bench_report(raw)
    report.write(out / "rtf_metrics.json")
    log.info("median RTF ratio %.3f (bridged %.4f vs baseline %.4f)",
             raw["rtf_ratio"], raw["median_bridged_rtf"], raw["median_baseline_rtf"])
    print(json.dumps({k: raw[k] for k in
                      ("token_rate_hz", "steps_ratio", "rtf_ratio",
                       "median_bridged_rtf", "median_baseline_rtf")}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    corpus = _corpus_for(cfg, args)
    seeds = [int(s) for s in args.seeds.split(",")]
    with JsonlLogger(out / "ablation_log.jsonl") as jl:
        results = run_ablation(cfg, corpus, out, seeds=seeds,
                               bridge_steps=args.bridge_steps, ar_steps=args.steps, logger=jl)
    (out / "ablation_report.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    log.info("ablation ordering holds per seed: %s", results["ordering_holds"])
    print(json.dumps({"majority_ordering": results["majority_ordering"],
                      "ordering_holds": results["ordering_holds"]}))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(n_seeds=args.seeds_count, emit=print)
    failed = [r for r in results if not r["passed"]]
    print(json.dumps({"checks": len(results), "failed": len(failed),
                      "backend": kernels.backend_name()}))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bridgecodec",
        description="Sparse-token speech-feature codec and autoregressive generator",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True):
        sp.add_argument("--config", type=str, default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None, help="override corpus/train seeds")
        sp.add_argument("--out", type=str, default=None, help="output directory")
        sp.add_argument("--device", type=str, default="cpu", choices=["cpu"],
                        help="reserved; cpu only")
        if manifest:
            sp.add_argument("--manifest", type=str, default=None,
                            help="corpus manifest.json (default: regenerate from config)")

    sp = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(sp, manifest=False)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("train-bridge", help="train both bridging modules")
    common(sp)
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(func=cmd_train_bridge)

    sp = sub.add_parser("train-ar", help="train the autoregressive generator")
    common(sp)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--bridge-checkpoint", type=str, required=True)
    sp.set_defaults(func=cmd_train_ar)

    sp = sub.add_parser("synthesize", help="generate features for a target text")
    common(sp)
    sp.add_argument("--ar-checkpoint", type=str, required=True)
    sp.add_argument("--bridge-checkpoint", type=str, required=True)
    sp.add_argument("--reference", type=str, required=True, help="reference utterance id")
    sp.add_argument("--text", type=str, required=True, help="target transcript")
    sp.add_argument("--max-steps", type=int, default=None)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("bench-rtf", help="wall-clock comparison vs per-frame baseline")
    common(sp)
    sp.add_argument("--ar-checkpoint", type=str, required=True)
    sp.add_argument("--bridge-checkpoint", type=str, required=True)
    sp.add_argument("--runs", type=int, default=10)
    sp.add_argument("--seconds", type=float, default=5.0)
    sp.set_defaults(func=cmd_bench_rtf)

    sp = sub.add_parser("ablate", help="train and compare ablation variants")
    common(sp)
    sp.add_argument("--seeds", type=str, default="0,1,2", help="comma-separated seeds")
    sp.add_argument("--steps", type=int, default=None, help="AR steps per variant")
    sp.add_argument("--bridge-steps", type=int, default=None)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="run the gradient / brute-force oracle suite")
    sp.add_argument("--seeds-count", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)

    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BridgeError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
