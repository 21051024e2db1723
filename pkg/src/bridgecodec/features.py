"""Dense feature sequences: synthetic corpus generation and the BRGF file format.

The synthetic frontend stands in for a frozen pretrained feature encoder: each
character of an utterance deterministically emits a fixed number of frames
built from per-character smooth basis trajectories plus small seeded noise,
so the text-to-feature mapping is learnable and byte-reproducible.

BRGF layout: 24-byte header = magic "BRGF", u32 version(=1), u32 D, u32 T,
u32 frame_rate_hz, u32 reserved(=0), all little-endian; payload = T*D
float32 values, row-major. Files are written atomically (temp + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

MAGIC = b"BRGF"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")


@dataclass
class DenseFeatures:
    frames: np.ndarray  # (T, D) float32
    frame_rate_hz: int
    utterance_id: str

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (T>=1, D), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")


@dataclass
class Utterance:
    text: str
    features: DenseFeatures
    split: str  # train | dev | test

    @property
    def utterance_id(self) -> str:
        return self.features.utterance_id

    @property
    def speaker(self) -> int:
        """Speaker cluster index, encoded in the utterance id as '-sNN'."""
        return int(self.utterance_id.rsplit("-s", 1)[1])


@dataclass
class SyntheticCorpusSpec:
    n_utterances: int = 200
    feature_dim: int = 32
    frame_rate_hz: int = 50
    frames_per_char: int = 10
    min_text_len: int = 4
    max_text_len: int = 12
    vocabulary: str = "abcdefghijklmnopqrstuvwxyz "
    n_speakers: int = 4
    noise_scale: float = 0.05
    seed: int = 0
    generator: str = "char-basis"
    split_fractions: tuple = field(default=(0.8, 0.1, 0.1))

    def validate(self):
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")
        if not self.vocabulary:
            raise ValueError("vocabulary must be non-empty")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary has duplicate characters")
        if self.generator != "char-basis":
            raise ValueError(f"unknown generator kind {self.generator!r}")


def _centered_table(rng: np.random.Generator, n: int, d: int, scale: float) -> np.ndarray:
    table = rng.normal(0.0, scale, size=(n, d))
    return (table - table.mean(axis=0, keepdims=True)).astype(np.float32)


def generate_corpus(spec: SyntheticCorpusSpec) -> list[Utterance]:
    """Deterministic text-conditioned corpus; same spec => byte-identical features."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    vocab = spec.vocabulary
    # two smooth basis trajectories per character; tables centered so the
    # corpus per-dimension mean stays near zero
    attack = _centered_table(rng, len(vocab), d, 1.0)
    sustain = _centered_table(rng, len(vocab), d, 1.0)
    speaker_table = _centered_table(rng, spec.n_speakers, d, 0.25)
    char_index = {c: i for i, c in enumerate(vocab)}

    fpc = spec.frames_per_char
    tau = (np.arange(fpc, dtype=np.float32) + 0.5) / fpc
    bump = np.sin(np.pi * tau) ** 2  # 0 at char boundaries, peak mid-char
    wave = 0.5 * np.sin(2.0 * np.pi * tau)  # zero-mean within the char window

    n_train = int(round(spec.split_fractions[0] * spec.n_utterances))
    n_dev = int(round(spec.split_fractions[1] * spec.n_utterances))

    utts = []
    for idx in range(spec.n_utterances):
        length = int(rng.integers(spec.min_text_len, spec.max_text_len + 1))
        text = "".join(vocab[int(i)] for i in rng.integers(0, len(vocab), size=length))
        speaker = int(rng.integers(0, spec.n_speakers))
        frames = np.empty((fpc * length, d), dtype=np.float32)
        for pos, c in enumerate(text):
            ci = char_index[c]
            block = bump[:, None] * attack[ci] + wave[:, None] * sustain[ci]
            frames[pos * fpc : (pos + 1) * fpc] = block
        frames += speaker_table[speaker]
        frames += rng.normal(0.0, spec.noise_scale, size=frames.shape).astype(np.float32)
        if idx < n_train:
            split = "train"
        elif idx < n_train + n_dev:
            split = "dev"
        else:
            split = "test"
        feats = DenseFeatures(frames, spec.frame_rate_hz, f"u{idx:05d}-s{speaker:02d}")
        utts.append(Utterance(text=text, features=feats, split=split))
    return utts


# ---------------------------------------------------------------------------
# BRGF serialization
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_features(path, feats: DenseFeatures):
    t, d = feats.frames.shape
    header = HEADER.pack(MAGIC, VERSION, d, t, int(feats.frame_rate_hz), 0)
    payload = feats.frames.astype("<f4", copy=False).tobytes()
    _atomic_write(Path(path), header + payload)


def read_features(path, expected_dim: int | None = None, utterance_id: str | None = None) -> DenseFeatures:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, d, t, rate, _reserved = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    if expected_dim is not None and d != expected_dim:
        raise DimensionMismatchError(f"{path}: file feature dim {d} != expected {expected_dim}")
    need = t * d * 4
    body = raw[HEADER.size :]
    if len(body) < need:
        raise TruncatedFileError(f"{path}: payload has {len(body)} bytes, header promises {need}")
    if len(body) > need:
        raise DimensionMismatchError(f"{path}: payload has {len(body)} bytes, header promises {need}")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, d)
    if utterance_id is None:
        utterance_id = Path(path).stem
    return DenseFeatures(frames.copy(), int(rate), utterance_id)


# ---------------------------------------------------------------------------
# corpus on disk: BRGF files + JSON manifest
# ---------------------------------------------------------------------------


def write_corpus(utts: list[Utterance], out_dir) -> Path:
    """Write one BRGF file per utterance plus manifest.json; returns manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for utt in utts:
        rel = f"features/{utt.utterance_id}.brgf"
        write_features(out_dir / rel, utt.features)
        entries.append(
            {
                "utterance_id": utt.utterance_id,
                "text": utt.text,
                "feature_path": rel,
                "split": utt.split,
            }
        )
    manifest = out_dir / "manifest.json"
    _atomic_write(manifest, json.dumps(entries, indent=2).encode("utf-8"))
    return manifest


def read_corpus(manifest_path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    utts = []
    for e in entries:
        feats = read_features(root / e["feature_path"], utterance_id=e["utterance_id"])
        utts.append(Utterance(text=e["text"], features=feats, split=e["split"]))
    return utts


def corpus_digest(manifest_path) -> str:
    """SHA-256 over the manifest plus every feature file, for determinism checks."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256()
    h.update(manifest_path.read_bytes())
    entries = json.loads(manifest_path.read_text())
    for e in entries:
        h.update((manifest_path.parent / e["feature_path"]).read_bytes())
    return h.hexdigest()
