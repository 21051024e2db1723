"""Reconstruction side of the codec: sparse tokens -> dense frames.

A code predictor re-estimates the discarded level-2..L codes from the kept
first-level indices, the full code grid is decoded by summing codewords,
and a transposed conv (kernel 5, stride 5) followed by a mirrored
kernel-1/3/5 conv stack restores the original frame rate and feature width.

Training losses: summed per-(group, level) cross-entropy on the predicted
codes, plus two feature alignment points: compressed features vs. their
quantization, and final reconstruction vs. the input frames. The decode
path consumes the quantized features through a straight-through node so the
reconstruction term also trains the compression stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv1d, ConvTranspose1d, Embedding, Linear, Module
from .sparse_bridge import (
    CONTEXT_KERNELS,
    DOWNSAMPLE,
    RvqCodebooks,
    SparseBridge,
    rvq_encode_batch,
)


def rvq_decode(codes: np.ndarray, books: RvqCodebooks) -> np.ndarray:
    """(.., G, L) codes -> (.., G*dim) by summing codewords level 1..L per group."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.min(initial=0) < 0 or codes.max(initial=0) >= books.codebook_size:
        raise ValueError(f"code index outside [0, {books.codebook_size})")
    lead = codes.shape[:-2]
    out = np.zeros(lead + (books.width,), dtype=np.float32)
    for gi in range(books.groups):
        acc = np.zeros(lead + (books.dim,), dtype=np.float32)
        for li in range(books.levels):
            acc = acc + books.vectors[gi, li][codes[..., gi, li]]
        out[..., gi * books.dim : (gi + 1) * books.dim] = acc
    return out


@dataclass
class PredictedCodes:
    logits: dict            # (group, level) -> Tensor (T', K), levels 2..L
    hard: np.ndarray        # (T', G, L-1) argmax codes


@dataclass
class ReconstructedFeatures:
    frames: np.ndarray      # (T, D) after optional truncation
    source_tokens: int


class GroupCodePredictor(Module):
    """Predicts the missing levels for one RVQ group from its first-level codes."""

    def __init__(self, codebook_size: int, levels: int, embed_dim: int, hidden: int,
                 rng: np.random.Generator):
        self.embed = Embedding(codebook_size, embed_dim, rng)
        self.ctx = Conv1d(3, embed_dim, hidden, rng)
        self.heads = [
            Linear(hidden if level == 2 else hidden + embed_dim, codebook_size, rng, zero_init=True)
            for level in range(2, levels + 1)
        ]
        self.cond_embs = [Embedding(codebook_size, embed_dim, rng) for _ in range(2, levels)]
        self.levels = levels

    def __call__(self, first: np.ndarray, teacher: np.ndarray | None = None) -> tuple[dict, np.ndarray]:
        h = ad.gelu(self.ctx(self.embed(first)))
        logits = {}
        hard = np.empty((first.shape[0], self.levels - 1), dtype=np.int64)
        for i, level in enumerate(range(2, self.levels + 1)):
            if level == 2:
                lg = self.heads[i](h)
            else:
                prev = teacher[:, level - 2] if teacher is not None else hard[:, i - 1]
                cond = self.cond_embs[level - 3](prev)
                lg = self.heads[i](ad.concat([h, cond], axis=-1))
            logits[level] = lg
            hard[:, i] = np.argmax(lg.data, axis=-1)
        return logits, hard


class CodePredictor(Module):
    def __init__(self, groups: int, codebook_size: int, levels: int, embed_dim: int,
                 hidden: int, rng: np.random.Generator):
        self.groups_nets = [
            GroupCodePredictor(codebook_size, levels, embed_dim, hidden, rng) for _ in range(groups)
        ]
        self.codebook_size = codebook_size
        self.levels = levels

    def __call__(self, first_codes: np.ndarray, teacher_codes: np.ndarray | None = None) -> PredictedCodes:
        """first_codes (T', G); teacher_codes (T', G, L) enables teacher conditioning."""
        first_codes = np.asarray(first_codes, dtype=np.int64)
        if first_codes.max(initial=0) >= self.codebook_size:
            raise ValueError(f"token index outside [0, {self.codebook_size})")
        logits = {}
        hards = []
        for gi, net in enumerate(self.groups_nets):
            teacher = teacher_codes[:, gi, :] if teacher_codes is not None else None
            lg, hard = net(first_codes[:, gi], teacher)
            for level, t in lg.items():
                logits[(gi, level)] = t
            hards.append(hard)
        return PredictedCodes(logits=logits, hard=np.stack(hards, axis=1))


class DenseBridge(Module):
    """Sparse tokens -> reconstructed dense frames (the decode bridge)."""

    def __init__(self, feature_dim: int, groups: int, levels: int, codebook_size: int,
                 rng: np.random.Generator, predictor_embed: int = 32, predictor_hidden: int = 64):
        width = len(CONTEXT_KERNELS) * feature_dim
        self.predictor = CodePredictor(groups, codebook_size, levels, predictor_embed,
                                       predictor_hidden, rng)
        self.up = ConvTranspose1d(DOWNSAMPLE, width, width, rng, stride=DOWNSAMPLE)
        # mirrored multi-scale stack; zero-init so an untrained bridge reconstructs zeros
        self.refine = [Conv1d(k, width, feature_dim, rng, zero_init=True) for k in CONTEXT_KERNELS]
        self.feature_dim = feature_dim
        self.width = width

    def upsample_refine(self, q: Tensor) -> Tensor:
        """(.., T', 3D) -> (.., 5*T', D)."""
        h = ad.gelu(self.up(q))
        out = self.refine[0](h)
        for conv in self.refine[1:]:
            out = ad.add(out, conv(h))
        return out

    def decode(self, first_codes: np.ndarray, books: RvqCodebooks,
               teacher_codes: np.ndarray | None = None,
               true_len: int | None = None) -> ReconstructedFeatures:
        """Inference decode from (T', G) first-level codes.

        With teacher_codes given (bridge-training mode) the ground-truth
        level-2..L codes are used; otherwise the code predictor's argmax chain.
        """
        first_codes = np.asarray(first_codes, dtype=np.int64)
        n_tokens = first_codes.shape[0]
        if teacher_codes is not None:
            full = np.asarray(teacher_codes, dtype=np.int64)
        else:
            pred = self.predictor(first_codes, None)
            full = np.concatenate([first_codes[:, :, None], pred.hard], axis=2)
        q = rvq_decode(full, books)
        out = self.upsample_refine(Tensor(q)).data
        if true_len is not None:
            out = out[:true_len]
        return ReconstructedFeatures(frames=out, source_tokens=n_tokens)


@dataclass
class BridgeLossOutput:
    l_code: Tensor
    l_feat_f2: Tensor      # compressed features vs. their quantization
    l_feat_f0: Tensor      # reconstruction vs. input frames
    l_feat: Tensor
    l_total: Tensor
    rvq_codes: np.ndarray       # concatenated over the batch, (N, G, L)
    rvq_residuals: np.ndarray   # (N, G, L, dim)


def _sum(tensors: list[Tensor]) -> Tensor:
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return acc


def _mean(tensors: list[Tensor]) -> Tensor:
    return ad.scale(_sum(tensors), 1.0 / len(tensors))


def bridge_loss(sparse: SparseBridge, dense: DenseBridge, batch_frames: list[np.ndarray],
                commitment_weight: float = 0.0) -> BridgeLossOutput:
    """Joint training loss over a batch of utterances (code CE + feature MSE)."""
    books = sparse.codebooks
    code_terms, align_terms, recon_terms = [], [], []
    all_codes, all_res = [], []
    for frames in batch_frames:
        frames = np.asarray(frames, dtype=np.float32)
        t = frames.shape[0]
        x = Tensor(frames)
        f1, f2 = sparse.compress(x)
        rvq = rvq_encode_batch(f2.data, books)
        all_codes.append(rvq.codes)
        all_res.append(rvq.residuals)

        align_terms.append(ad.mse(f2, Tensor(rvq.quantized)))
        q_st = ad.straight_through(f2, rvq.quantized)
        recon = dense.upsample_refine(q_st)
        recon_terms.append(ad.mse(ad.slice_axis(recon, -2, 0, t), x))

        pred = dense.predictor(rvq.codes[:, :, 0], teacher_codes=rvq.codes)
        cell_terms = [
            ad.softmax_cross_entropy(pred.logits[(gi, level)], rvq.codes[:, gi, level - 1])
            for gi in range(books.groups)
            for level in range(2, books.levels + 1)
        ]
        # summed over the (G, L-1) grid, averaged over frames inside each cell
        code_terms.append(_sum(cell_terms))

    l_code = _mean(code_terms)
    l_align = _mean(align_terms)
    l_recon = _mean(recon_terms)
    l_feat = ad.add(l_align, l_recon)
    l_total = ad.add(l_code, l_feat)
    if commitment_weight:
        l_total = ad.add(l_total, ad.scale(l_align, commitment_weight))
    return BridgeLossOutput(
        l_code=l_code,
        l_feat_f2=l_align,
        l_feat_f0=l_recon,
        l_feat=l_feat,
        l_total=l_total,
        rvq_codes=np.concatenate(all_codes, axis=0),
        rvq_residuals=np.concatenate(all_res, axis=0),
    )


def encode_decode_roundtrip(sparse: SparseBridge, dense: DenseBridge, frames: np.ndarray,
                            teacher_codes: bool = False) -> np.ndarray:
    """Convenience: encode then decode one utterance, truncated to the input length."""
    enc = sparse.encode(frames)
    teacher = enc.codes if teacher_codes else None
    rec = dense.decode(enc.codes[:, :, 0], sparse.codebooks, teacher_codes=teacher,
                       true_len=enc.source_len)
    return rec.frames
