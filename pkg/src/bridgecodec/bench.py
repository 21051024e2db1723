"""Wall-clock comparison: 5-frames-per-step generator vs. a per-frame baseline.

Both systems share transformer dimensions and run greedy KV-cached decoding
for the same output duration (EOS suppressed so lengths match exactly). The
real-time-factor proxy is wall-clock seconds per generated second of speech;
the report carries the per-run samples plus the median ratio.
"""

from __future__ import annotations

import time

import numpy as np

from .ar_model import ArModel, ArSession, BOS, BOS_SPEECH, SEP, TextVocab, generate
from .config import Config
from .dense_bridge import DenseBridge
from .features import Utterance
from .metrics import MetricsReport
from .sparse_bridge import DOWNSAMPLE, SparseBridge
from .training import build_ar


def build_frame_baseline(cfg: Config) -> ArModel:
    """Per-frame AR twin: same dims, one frame in -> one token out (timing only)."""
    model, _ = build_ar(cfg, input_mode="frames")
    return model


def _session(vocab: TextVocab, ref: Utterance, target_text: str, max_steps: int) -> ArSession:
    ids = np.array([BOS] + vocab.encode(ref.text) + [SEP] + vocab.encode(target_text) + [BOS_SPEECH],
                   dtype=np.int64)
    return ArSession(text_ids=ids, prompt_features=ref.features.frames,
                     max_steps=max_steps, suppress_eos=True)


def bench_rtf(cfg: Config, sparse: SparseBridge, dense: DenseBridge, bridged: ArModel,
              ref: Utterance, target_text: str = "benchmark target", seconds: float = 5.0,
              runs: int = 10) -> dict:
    vocab = TextVocab(cfg.corpus.vocabulary)
    rate = cfg.corpus.frame_rate_hz
    n_frames = int(seconds * rate)
    baseline = build_frame_baseline(cfg)
    books = sparse.codebooks

    def run_bridged():
        session = _session(vocab, ref, target_text, n_frames // DOWNSAMPLE)
        t0 = time.perf_counter()
        frames = generate(bridged, dense, books, session)
        return time.perf_counter() - t0, frames.shape[0], session

    def run_baseline():
        session = _session(vocab, ref, target_text, n_frames)
        t0 = time.perf_counter()
        frames = generate(baseline, dense, books, session)
        return time.perf_counter() - t0, frames.shape[0], session

    run_bridged()  # warm-up (JIT compilation, caches) excluded from timing
    run_baseline()

    bridged_rtf, baseline_rtf = [], []
    bridged_steps = baseline_steps = 0
    for _ in range(runs):
        dt, nf, session = run_bridged()
        bridged_rtf.append(dt / (nf / rate))
        bridged_steps = session.steps
        dt, nf, session = run_baseline()
        baseline_rtf.append(dt / (nf / rate))
        baseline_steps = session.steps

    med_bridged = float(np.median(bridged_rtf))
    med_baseline = float(np.median(baseline_rtf))
    return {
        "frame_rate_hz": rate,
        "token_rate_hz": rate / DOWNSAMPLE,
        "output_frames": n_frames,
        "bridged_steps": bridged_steps,
        "baseline_steps": baseline_steps,
        "steps_ratio": bridged_steps / baseline_steps,
        "bridged_rtf": bridged_rtf,
        "baseline_rtf": baseline_rtf,
        "median_bridged_rtf": med_bridged,
        "median_baseline_rtf": med_baseline,
        "rtf_ratio": med_bridged / med_baseline,
    }


def bench_report(raw: dict) -> MetricsReport:
    return MetricsReport(
        token_rate_hz=raw["token_rate_hz"],
        ar_steps_per_second_of_speech=raw["bridged_steps"] / (raw["output_frames"] / raw["frame_rate_hz"]),
        rtf_ratio=raw["rtf_ratio"],
        curves={"bridged_rtf": raw["bridged_rtf"], "baseline_rtf": raw["baseline_rtf"]},
    )
