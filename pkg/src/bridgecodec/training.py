"""Training loops, evaluation, synthesis and the ablation harness."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ar_model import (
    BOS,
    BOS_SPEECH,
    SEP,
    ArModel,
    ArSession,
    TextVocab,
    build_training_sequence,
    generate,
    generate_token_input,
)
from .autodiff import Tape
from .checkpoint import MAGIC_AR, MAGIC_BRIDGE, load_checkpoint, save_checkpoint
from .config import Config
from .dense_bridge import DenseBridge, bridge_loss, encode_decode_roundtrip
from .errors import TrainingDivergedError
from .features import Utterance, write_features
from .metrics import JsonlLogger
from .optim import AdamW, LrSchedule
from .sparse_bridge import DOWNSAMPLE, SparseBridge, codebook_update

log = logging.getLogger("bridgecodec")


# ---------------------------------------------------------------------------
# construction / checkpoint plumbing
# ---------------------------------------------------------------------------


def build_bridges(cfg: Config) -> tuple[SparseBridge, DenseBridge]:
    rng = np.random.default_rng(cfg.bridge.seed)
    sparse = SparseBridge(
        cfg.corpus.feature_dim,
        cfg.bridge.groups,
        cfg.bridge.levels,
        cfg.bridge.codebook_size,
        rng,
        ema_decay=cfg.bridge.ema_decay,
        dead_code_threshold=cfg.bridge.dead_code_threshold,
    )
    dense = DenseBridge(
        cfg.corpus.feature_dim,
        cfg.bridge.groups,
        cfg.bridge.levels,
        cfg.bridge.codebook_size,
        rng,
        predictor_embed=cfg.bridge.predictor_embed,
        predictor_hidden=cfg.bridge.predictor_hidden,
    )
    return sparse, dense


def build_ar(cfg: Config, input_mode: str | None = None) -> tuple[ArModel, TextVocab]:
    vocab = TextVocab(cfg.corpus.vocabulary)
    rng = np.random.default_rng(cfg.ar.seed)
    model = ArModel(
        vocab_size=vocab.size,
        feature_dim=cfg.corpus.feature_dim,
        groups=cfg.bridge.groups,
        codebook_size=cfg.bridge.codebook_size,
        width=cfg.ar.width,
        n_layers=cfg.ar.layers,
        n_heads=cfg.ar.heads,
        context=cfg.ar.context,
        rng=rng,
        input_mode=input_mode or cfg.ar.input_mode,
    )
    return model, vocab


def _bridge_blobs(sparse: SparseBridge, dense: DenseBridge) -> dict[str, np.ndarray]:
    blobs = {f"sparse.{k}": v.data for k, v in sparse.named_params().items()}
    blobs.update({f"dense.{k}": v.data for k, v in dense.named_params().items()})
    blobs.update(sparse.codebooks.state_blobs())
    return blobs


def save_bridge_checkpoint(path, sparse, dense, cfg: Config, step: int, opt: AdamW | None = None):
    blobs = _bridge_blobs(sparse, dense)
    meta = {"kind": "bridge", "opt_t": opt.t if opt else 0}
    if opt is not None:
        blobs.update(opt.state_blobs())
    save_checkpoint(path, MAGIC_BRIDGE, step, cfg.content_hash(), meta, blobs)


def load_bridge_checkpoint(path, cfg: Config, expect_hash: bool = True):
    expected = cfg.content_hash() if expect_hash else None
    step, chash, meta, blobs = load_checkpoint(path, MAGIC_BRIDGE, expected)
    sparse, dense = build_bridges(cfg)
    sparse.load_state(blobs, prefix="sparse.")
    dense.load_state(blobs, prefix="dense.")
    sparse.codebooks.load_state_blobs(blobs)
    return sparse, dense, step, chash, meta


def save_ar_checkpoint(path, model: ArModel, cfg: Config, step: int, bridge_hash: str,
                       opt: AdamW | None = None, input_mode: str | None = None):
    blobs = {f"ar.{k}": v.data for k, v in model.named_params().items()}
    meta = {
        "kind": "ar",
        "bridge_config_hash": bridge_hash,
        "input_mode": input_mode or model.input_mode,
        "opt_t": opt.t if opt else 0,
    }
    if opt is not None:
        blobs.update(opt.state_blobs())
    save_checkpoint(path, MAGIC_AR, step, cfg.content_hash(), meta, blobs)


def load_ar_checkpoint(path, cfg: Config, expect_hash: bool = True):
    expected = cfg.content_hash() if expect_hash else None
    step, chash, meta, blobs = load_checkpoint(path, MAGIC_AR, expected)
    model, vocab = build_ar(cfg, input_mode=meta.get("input_mode"))
    model.load_state(blobs, prefix="ar.")
    return model, vocab, step, chash, meta


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------


def split_utts(corpus: list[Utterance], split: str) -> list[Utterance]:
    got = [u for u in corpus if u.split == split]
    return got if got else list(corpus)


def make_pairs(utts: list[Utterance], rng: np.random.Generator):
    """(reference, target) pairs: reference drawn from the same speaker cluster."""
    by_speaker: dict[int, list[int]] = {}
    for i, u in enumerate(utts):
        by_speaker.setdefault(u.speaker, []).append(i)
    pairs = []
    for i, u in enumerate(utts):
        pool = [j for j in by_speaker[u.speaker] if j != i]
        ref = utts[int(rng.choice(pool))] if pool else u
        pairs.append((ref, u))
    return pairs


def corpus_variance(utts: list[Utterance]) -> float:
    stacked = np.concatenate([u.features.frames for u in utts], axis=0)
    return float(stacked.var(axis=0).mean())


# ---------------------------------------------------------------------------
# bridge training
# ---------------------------------------------------------------------------


def eval_bridge(sparse, dense, utts, cap: int = 16) -> dict:
    sel = utts[:cap]
    pred_mse, teach_mse = [], []
    for u in sel:
        frames = u.features.frames
        rec_pred = encode_decode_roundtrip(sparse, dense, frames, teacher_codes=False)
        rec_teach = encode_decode_roundtrip(sparse, dense, frames, teacher_codes=True)
        pred_mse.append(float(np.mean((rec_pred - frames) ** 2)))
        teach_mse.append(float(np.mean((rec_teach - frames) ** 2)))
    return {
        "roundtrip_mse": float(np.mean(pred_mse)),
        "roundtrip_mse_teacher": float(np.mean(teach_mse)),
    }


def train_bridge(cfg: Config, corpus: list[Utterance], out_dir, steps: int | None = None,
                 logger: JsonlLogger | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = steps if steps is not None else cfg.train.bridge_steps
    train = split_utts(corpus, "train")
    dev = split_utts(corpus, "dev")
    batch = max(1, min(cfg.train.batch_size, len(train)))
    steps_per_epoch = max(1, len(train) // batch)
    sparse, dense = build_bridges(cfg)
    params = {f"sparse.{k}": v for k, v in sparse.named_params().items()}
    params.update({f"dense.{k}": v for k, v in dense.named_params().items()})
    opt = AdamW(params, lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
                eps=cfg.train.eps, weight_decay=cfg.train.weight_decay)
    sched = LrSchedule(cfg.train.lr, cfg.train.lr_decay_per_epoch)
    rng = np.random.default_rng(cfg.train.seed)
    history = {"l_code": [], "l_feat": [], "l_feat_f0": [], "l_feat_f2": []}
    ckpt_path = out_dir / "bridge.ckpt"

    for step in range(steps):
        opt.lr = sched.at_epoch(step // steps_per_epoch)
        idx = rng.integers(0, len(train), size=batch)
        frames = [train[int(i)].features.frames for i in idx]
        with Tape() as tape:
            out = bridge_loss(sparse, dense, frames, commitment_weight=cfg.bridge.commitment_weight)
            total = float(out.l_total.data)
            if not np.isfinite(total):
                raise TrainingDivergedError(f"non-finite bridge loss at step {step}: {total}")
            tape.backward(out.l_total)
        opt.step(tape)
        codebook_update(out.rvq_codes, out.rvq_residuals, sparse.codebooks, rng=rng,
                        reseed=(step + 1) % steps_per_epoch == 0)
        history["l_code"].append(float(out.l_code.data))
        history["l_feat"].append(float(out.l_feat.data))
        history["l_feat_f0"].append(float(out.l_feat_f0.data))
        history["l_feat_f2"].append(float(out.l_feat_f2.data))
        if logger and (step % 50 == 0 or step == steps - 1):
            logger.log({"step": step, "l_code": history["l_code"][-1],
                        "l_feat": history["l_feat"][-1],
                        "l_feat_f0": history["l_feat_f0"][-1],
                        "l_feat_f2": history["l_feat_f2"][-1], "lr": opt.lr})
        if (step + 1) % cfg.train.eval_every == 0 or step == steps - 1:
            ev = eval_bridge(sparse, dense, dev)
            history.setdefault("dev_steps", []).append(step)
            history.setdefault("dev_roundtrip_mse", []).append(ev["roundtrip_mse"])
            history.setdefault("dev_roundtrip_mse_teacher", []).append(ev["roundtrip_mse_teacher"])
            if logger:
                logger.log({"step": step, **ev})
        if (step + 1) % cfg.train.checkpoint_every == 0:
            save_bridge_checkpoint(ckpt_path, sparse, dense, cfg, step + 1, opt)
    save_bridge_checkpoint(ckpt_path, sparse, dense, cfg, steps, opt)
    return sparse, dense, ckpt_path, history


# ---------------------------------------------------------------------------
# AR training
# ---------------------------------------------------------------------------


def build_examples(cfg: Config, corpus_split: list[Utterance], sparse: SparseBridge,
                   vocab: TextVocab, rng: np.random.Generator):
    return [build_training_sequence(ref, tgt, sparse, vocab)
            for ref, tgt in make_pairs(corpus_split, rng)]


def train_ar(cfg: Config, corpus: list[Utterance], sparse: SparseBridge, dense: DenseBridge,
             out_dir, steps: int | None = None, logger: JsonlLogger | None = None,
             input_mode: str | None = None, feature_loss_on: bool | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = steps if steps is not None else cfg.train.ar_steps
    mode = input_mode or cfg.ar.input_mode
    use_feat = cfg.ar.feature_loss if feature_loss_on is None else feature_loss_on
    if mode == "tokens":
        use_feat = False

    sparse.set_requires_grad(False)
    dense.set_requires_grad(False)
    model, vocab = build_ar(cfg, input_mode=mode)
    rng = np.random.default_rng(cfg.train.seed)
    train = split_utts(corpus, "train")
    examples = build_examples(cfg, train, sparse, vocab, rng)
    batch = max(1, min(cfg.train.batch_size, len(examples)))
    steps_per_epoch = max(1, len(examples) // batch)
    opt = AdamW(model.named_params(), lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
                eps=cfg.train.eps, weight_decay=cfg.train.weight_decay)
    sched = LrSchedule(cfg.train.lr, cfg.train.lr_decay_per_epoch)
    history = {"l_token": [], "l_features": [], "l_ar": [], "token_accuracy": []}
    ckpt_path = out_dir / ("ar.ckpt" if mode == "groups" else f"ar_{mode}.ckpt")
    bridge_hash = cfg.content_hash()

    for step in range(steps):
        opt.lr = sched.at_epoch(step // steps_per_epoch)
        idx = rng.integers(0, len(examples), size=batch)
        batch_ex = [examples[int(i)] for i in idx]
        with Tape() as tape:
            fwd = model.forward_batch(batch_ex)
            l_token, acc = model.token_loss(fwd)
            if use_feat:
                l_feat = model.feature_loss(fwd, dense, sparse.codebooks)
                l_ar = ad.add(l_token, l_feat)
            else:
                l_feat = None
                l_ar = l_token
            total = float(l_ar.data)
            if not np.isfinite(total):
                raise TrainingDivergedError(f"non-finite AR loss at step {step}: {total}")
            tape.backward(l_ar)
        opt.step(tape)
        history["l_token"].append(float(l_token.data))
        history["l_features"].append(float(l_feat.data) if l_feat is not None else 0.0)
        history["l_ar"].append(total)
        history["token_accuracy"].append(acc)
        if logger and (step % 50 == 0 or step == steps - 1):
            logger.log({"step": step, "l_token": history["l_token"][-1],
                        "l_features": history["l_features"][-1], "l_ar": total,
                        "token_accuracy": acc, "lr": opt.lr})
        if (step + 1) % cfg.train.checkpoint_every == 0:
            save_ar_checkpoint(ckpt_path, model, cfg, step + 1, bridge_hash, opt, input_mode=mode)
    save_ar_checkpoint(ckpt_path, model, cfg, steps, bridge_hash, opt, input_mode=mode)
    return model, vocab, ckpt_path, history


def teacher_forced_accuracy(model: ArModel, examples) -> float:
    fwd = model.forward_batch(examples)
    _, acc = model.token_loss(fwd)
    return acc


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def make_session(vocab: TextVocab, ref: Utterance, target_text: str, frames_per_char: int,
                 max_steps: int | None = None, suppress_eos: bool = False) -> ArSession:
    text_ids = np.array(
        [BOS] + vocab.encode(ref.text) + [SEP] + vocab.encode(target_text) + [BOS_SPEECH],
        dtype=np.int64,
    )
    if max_steps is None:
        budget = frames_per_char * len(target_text)
        max_steps = -(-budget // DOWNSAMPLE) + 5
    return ArSession(text_ids=text_ids, prompt_features=ref.features.frames,
                     max_steps=max_steps, suppress_eos=suppress_eos)


def synthesize(model: ArModel, dense: DenseBridge, sparse: SparseBridge, vocab: TextVocab,
               ref: Utterance, target_text: str, cfg: Config,
               max_steps: int | None = None, out_features=None, out_transcript=None):
    session = make_session(vocab, ref, target_text, cfg.corpus.frames_per_char, max_steps)
    if model.input_mode == "tokens":
        prompt_tokens = sparse.encode(ref.features.frames).codes[:, :, 0]
        frames = generate_token_input(model, sparse.codebooks, session, prompt_tokens)
    else:
        frames = generate(model, dense, sparse.codebooks, session)
    if out_features is not None:
        from .features import DenseFeatures

        if frames.shape[0] == 0:
            frames = np.zeros((1, model.feature_dim), dtype=np.float32)
        write_features(out_features, DenseFeatures(frames, cfg.corpus.frame_rate_hz, "synthesized"))
    if out_transcript is not None:
        with JsonlLogger(out_transcript) as jl:
            for rec in session.transcript:
                jl.log(rec)
    return session


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_feature_loss", "no_dense_bridge")


def _variant_config(cfg: Config, variant: str) -> Config:
    if variant == "full":
        return cfg
    if variant == "no_feature_loss":
        return replace(cfg, ar=replace(cfg.ar, feature_loss=False))
    if variant == "no_dense_bridge":
        return replace(cfg, ar=replace(cfg.ar, feature_loss=False, input_mode="tokens"))
    raise ValueError(f"unknown ablation variant {variant!r}")


def eval_synthesis_mse(model: ArModel, dense: DenseBridge, sparse: SparseBridge,
                       vocab: TextVocab, cfg: Config, utts: list[Utterance],
                       rng: np.random.Generator, cap: int = 8) -> float:
    """Mean MSE between synthesized and ground-truth features over paired utterances."""
    pairs = make_pairs(utts[:cap], rng)
    errs = []
    for ref, tgt in pairs:
        gt = tgt.features.frames
        max_steps = -(-gt.shape[0] // DOWNSAMPLE)
        session = make_session(vocab, ref, tgt.text, cfg.corpus.frames_per_char,
                               max_steps=max_steps, suppress_eos=True)
        if model.input_mode == "tokens":
            prompt_tokens = sparse.encode(ref.features.frames).codes[:, :, 0]
            frames = generate_token_input(model, sparse.codebooks, session, prompt_tokens)
        else:
            frames = generate(model, dense, sparse.codebooks, session)
        n = min(frames.shape[0], gt.shape[0])
        errs.append(float(np.mean((frames[:n] - gt[:n]) ** 2)))
    return float(np.mean(errs))


def run_ablation(cfg: Config, corpus: list[Utterance], out_dir, seeds=(0, 1, 2),
                 bridge_steps: int | None = None, ar_steps: int | None = None,
                 logger: JsonlLogger | None = None) -> dict:
    """Train every variant per seed (identical data/steps) and compare dev MSE."""
    out_dir = Path(out_dir)
    results = {"seeds": list(seeds), "variants": {v: [] for v in ABLATION_VARIANTS}}
    dev = split_utts(corpus, "dev")
    for seed in seeds:
        seeded = replace(cfg, train=replace(cfg.train, seed=int(seed)))
        sparse, dense, _, _ = train_bridge(seeded, corpus, out_dir / f"seed{seed}",
                                           steps=bridge_steps)
        for variant in ABLATION_VARIANTS:
            vcfg = _variant_config(seeded, variant)
            model, vocab, _, hist = train_ar(vcfg, corpus, sparse, dense,
                                             out_dir / f"seed{seed}" / variant, steps=ar_steps)
            mse = eval_synthesis_mse(model, dense, sparse, vocab, vcfg, dev,
                                     np.random.default_rng(seed))
            results["variants"][variant].append(
                {"seed": int(seed), "dev_mse": mse, "token_accuracy": hist["token_accuracy"][-1]}
            )
            if logger:
                logger.log({"seed": int(seed), "variant": variant, "dev_mse": mse})
    orderings = []
    for i in range(len(seeds)):
        full = results["variants"]["full"][i]["dev_mse"]
        nofeat = results["variants"]["no_feature_loss"][i]["dev_mse"]
        nobridge = results["variants"]["no_dense_bridge"][i]["dev_mse"]
        orderings.append(full <= nofeat <= nobridge)
    results["ordering_holds"] = orderings
    results["majority_ordering"] = sum(orderings) > len(orderings) / 2
    return results
