"""Compression side of the codec: dense frames -> sparse tokens.

Pipeline: multi-scale context extraction (kernels 1/3/5, channel concat, so
the context width is 3x the input dim), a learned strided conv that lowers
the frame rate 5x, split-group residual vector quantization producing a
groups x levels code grid per compressed frame, and a selector that keeps
only the first-level indices as the sparse token.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ShapeMismatchError
from .layers import Conv1d, Module

log = logging.getLogger("bridgecodec")

DOWNSAMPLE = 5
CONTEXT_KERNELS = (1, 3, 5)


@dataclass
class CodeMatrix:
    """groups x levels integer grid for one compressed frame."""

    codes: np.ndarray  # (G, L) int64
    codebook_size: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2:
            raise ValueError(f"code matrix must be 2-D, got {self.codes.shape}")
        if self.codes.min(initial=0) < 0 or self.codes.max(initial=0) >= self.codebook_size:
            raise ValueError("code index outside [0, codebook_size)")


@dataclass
class SparseToken:
    """First-level code per group; EOS is only meaningful to the AR generator."""

    first_level: tuple
    eos: bool = False

    def __post_init__(self):
        if self.eos and len(self.first_level) > 0:
            raise ValueError("EOS token carries no code indices")


def select_codes(cm: CodeMatrix) -> SparseToken:
    return SparseToken(first_level=tuple(int(c) for c in cm.codes[:, 0]))


class RvqCodebooks:
    """Codebooks plus EMA training state for every (group, level) pair.

    Index 0 of every codebook is pinned to the zero vector and never updated,
    which guarantees residual norms never increase across levels.
    """

    def __init__(self, groups: int, levels: int, codebook_size: int, dim: int,
                 ema_decay: float = 0.99, dead_code_threshold: float = 1e-3):
        self.groups = groups
        self.levels = levels
        self.codebook_size = codebook_size
        self.dim = dim
        self.ema_decay = float(ema_decay)
        self.dead_code_threshold = float(dead_code_threshold)
        self.vectors = np.zeros((groups, levels, codebook_size, dim), dtype=np.float32)
        self.ema_counts = np.zeros((groups, levels, codebook_size), dtype=np.float32)
        self.ema_sums = np.zeros((groups, levels, codebook_size, dim), dtype=np.float32)
        self._bootstrapped = False

    @property
    def width(self) -> int:
        return self.groups * self.dim

    def is_untrained(self) -> bool:
        return not np.any(self.vectors)

    def state_blobs(self) -> dict[str, np.ndarray]:
        return {
            "codebooks.vectors": self.vectors,
            "codebooks.ema_counts": self.ema_counts,
            "codebooks.ema_sums": self.ema_sums,
        }

    def load_state_blobs(self, blobs):
        self.vectors = np.ascontiguousarray(blobs["codebooks.vectors"], dtype=np.float32)
        self.ema_counts = np.ascontiguousarray(blobs["codebooks.ema_counts"], dtype=np.float32)
        self.ema_sums = np.ascontiguousarray(blobs["codebooks.ema_sums"], dtype=np.float32)
        self._bootstrapped = not self.is_untrained()


@dataclass
class RvqResult:
    codes: np.ndarray       # (N, G, L) int64
    quantized: np.ndarray   # (N, G*dim) float32
    residuals: np.ndarray   # (N, G, L, dim) float32, residual entering each level


def rvq_encode_batch(frames: np.ndarray, books: RvqCodebooks) -> RvqResult:
    """Quantize (N, G*dim) frames level by level; ties pick the lowest index."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ShapeMismatchError(f"rvq_encode expects (N, width), got {frames.shape}")
    if frames.shape[1] != books.width:
        raise ShapeMismatchError(
            f"frame width {frames.shape[1]} not divisible into {books.groups} groups of {books.dim}"
        )
    n = frames.shape[0]
    g, l, d = books.groups, books.levels, books.dim
    codes = np.empty((n, g, l), dtype=np.int64)
    quant = np.zeros((n, g * d), dtype=np.float32)
    residuals = np.empty((n, g, l, d), dtype=np.float32)
    for gi in range(g):
        r = frames[:, gi * d : (gi + 1) * d].astype(np.float64)
        for li in range(l):
            residuals[:, gi, li] = r.astype(np.float32)
            cb = books.vectors[gi, li].astype(np.float64)
            idx = kernels.nearest_code(np.ascontiguousarray(r), np.ascontiguousarray(cb))
            codes[:, gi, li] = idx
            r = r - cb[idx]
        quant[:, gi * d : (gi + 1) * d] = (frames[:, gi * d : (gi + 1) * d].astype(np.float64) - r).astype(np.float32)
    return RvqResult(codes=codes, quantized=quant, residuals=residuals)


def rvq_encode(frame: np.ndarray, books: RvqCodebooks):
    """Single-frame form: returns (CodeMatrix, quantized vector, residual trace).

    The trace holds the residual entering each level plus the final residual,
    so trace[-1] is what quantization failed to capture.
    """
    res = rvq_encode_batch(np.asarray(frame, dtype=np.float32)[None, :], books)
    cm = CodeMatrix(res.codes[0], books.codebook_size)
    final = np.asarray(frame, dtype=np.float32) - res.quantized[0]
    trace = [res.residuals[0, :, li, :].reshape(-1) for li in range(books.levels)]
    trace.append(final)
    return cm, res.quantized[0], trace


def codebook_update(codes: np.ndarray, residuals: np.ndarray, books: RvqCodebooks,
                    rng: np.random.Generator | None = None, reseed: bool = False):
    """EMA k-means update of assigned codewords; index 0 stays zero.

    `codes` is (N, G, L) and `residuals` (N, G, L, dim) as produced by
    rvq_encode_batch. The very first call seeds the free codewords from batch
    residuals; with reseed=True (called once per epoch) codewords whose EMA
    count fell below the dead-code threshold are re-seeded the same way.
    """
    n = codes.shape[0]
    if n == 0:
        return
    decay = np.float32(books.ema_decay)
    one_minus = np.float32(1.0 - books.ema_decay)
    if not books._bootstrapped:
        _seed_from_batch(residuals, books, rng)
        books._bootstrapped = True
    for gi in range(books.groups):
        for li in range(books.levels):
            res = np.ascontiguousarray(residuals[:, gi, li, :])
            idx = np.ascontiguousarray(codes[:, gi, li])
            counts, sums = kernels.code_stats(res, idx, books.codebook_size)
            books.ema_counts[gi, li] = decay * books.ema_counts[gi, li] + one_minus * counts
            books.ema_sums[gi, li] = decay * books.ema_sums[gi, li] + one_minus * sums
            active = books.ema_counts[gi, li] > 1e-9
            active[0] = False  # pinned zero codeword
            books.vectors[gi, li, active] = (
                books.ema_sums[gi, li, active] / books.ema_counts[gi, li, active, None]
            )
    if reseed and rng is not None:
        reseed_dead_codes(residuals, books, rng)


def _seed_from_batch(residuals: np.ndarray, books: RvqCodebooks, rng: np.random.Generator | None):
    """First-update bootstrap: fill free codewords from batch residuals."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = residuals.shape[0]
    for gi in range(books.groups):
        for li in range(books.levels):
            res = residuals[:, gi, li, :]
            picks = rng.integers(0, n, size=books.codebook_size - 1)
            books.vectors[gi, li, 1:] = res[picks]
            books.ema_sums[gi, li, 1:] = res[picks]
            books.ema_counts[gi, li, 1:] = 1.0


def reseed_dead_codes(residuals: np.ndarray, books: RvqCodebooks, rng: np.random.Generator):
    for gi in range(books.groups):
        for li in range(books.levels):
            dead = np.where(books.ema_counts[gi, li, 1:] < books.dead_code_threshold)[0] + 1
            if dead.size == 0:
                continue
            res = residuals[:, gi, li, :]
            picks = rng.integers(0, res.shape[0], size=dead.size)
            books.vectors[gi, li, dead] = res[picks]
            books.ema_sums[gi, li, dead] = res[picks]
            books.ema_counts[gi, li, dead] = 1.0


@dataclass
class EncodeResult:
    tokens: list            # list[SparseToken], length T'
    codes: np.ndarray       # (T', G, L)
    f1: np.ndarray          # (T, 3D)
    f2: np.ndarray          # (T', 3D)
    quantized: np.ndarray   # (T', 3D)
    source_len: int
    token_rate_hz: float
    residuals: np.ndarray = field(repr=False, default=None)


class SparseBridge(Module):
    """Dense features (T, D) -> sparse tokens at 1/5 the frame rate."""

    def __init__(self, feature_dim: int, groups: int, levels: int, codebook_size: int,
                 rng: np.random.Generator, ema_decay: float = 0.99,
                 dead_code_threshold: float = 1e-3):
        self.branches = [Conv1d(k, feature_dim, feature_dim, rng) for k in CONTEXT_KERNELS]
        width = len(CONTEXT_KERNELS) * feature_dim
        self.down = Conv1d(DOWNSAMPLE, width, width, rng, stride=DOWNSAMPLE, padding="valid")
        if width % groups != 0:
            raise ShapeMismatchError(f"context width {width} not divisible by {groups} groups")
        self.feature_dim = feature_dim
        self.width = width
        self.codebooks = RvqCodebooks(groups, levels, codebook_size, width // groups,
                                      ema_decay=ema_decay, dead_code_threshold=dead_code_threshold)

    def extract_context(self, x: Tensor) -> Tensor:
        """(.., T, D) -> (.., T, 3D): kernel-1/3/5 branches, GELU, channel concat."""
        return ad.concat([ad.gelu(conv(x)) for conv in self.branches], axis=-1)

    def downsample(self, f1: Tensor) -> Tensor:
        """(.., T, 3D) -> (.., ceil(T/5), 3D) via edge-replication pad + strided conv."""
        t = f1.shape[-2]
        pad = (-t) % DOWNSAMPLE
        return self.down(ad.pad_time_edge(f1, pad))

    def compress(self, x: Tensor) -> tuple[Tensor, Tensor]:
        f1 = self.extract_context(x)
        return f1, self.downsample(f1)

    def encode(self, frames: np.ndarray, frame_rate_hz: float | None = None) -> EncodeResult:
        """Full encode of one utterance's (T, D) frames; pure given frozen weights."""
        frames = np.asarray(frames, dtype=np.float32)
        if self.codebooks.is_untrained():
            log.warning("encoding with untrained (all-zero) codebooks")
        f1, f2 = self.compress(Tensor(frames))
        rvq = rvq_encode_batch(f2.data, self.codebooks)
        tokens = [SparseToken(tuple(int(c) for c in row)) for row in rvq.codes[:, :, 0]]
        rate = frame_rate_hz / DOWNSAMPLE if frame_rate_hz else 0.0
        return EncodeResult(
            tokens=tokens,
            codes=rvq.codes,
            f1=f1.data,
            f2=f2.data,
            quantized=rvq.quantized,
            source_len=frames.shape[0],
            token_rate_hz=rate,
            residuals=rvq.residuals,
        )
