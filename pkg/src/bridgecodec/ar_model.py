"""Autoregressive sparse-token generator.

A decoder-only transformer consumes the tokenized transcripts (reference +
target) followed by speech inputs, and predicts the next sparse token with
one classification head per RVQ group; head 0 carries an extra class used as
the end-of-speech (EOS) event. In the standard input mode each speech step
feeds five consecutive dense feature frames, so the model runs at 1/5 the
frame rate. Previously emitted tokens are never fed back as inputs; only
features and text condition the prediction.

Training layout per example:
    [BOS, ref chars, SEP, target chars, BOS_SPEECH, group_1 ... group_T']
BOS_SPEECH predicts token_1, group_t predicts token_{t+1}, and the final
group predicts EOS. Inference closes the loop by decoding each emitted token
to five frames through the frozen reconstruction bridge and feeding them
back as the next group.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .dense_bridge import DenseBridge, rvq_decode
from .errors import ShapeMismatchError
from .features import Utterance
from .layers import Embedding, LayerNorm, Linear, Module, TransformerBlock
from .sparse_bridge import RvqCodebooks, SparseBridge

PAD, BOS, SEP, BOS_SPEECH = 0, 1, 2, 3
N_SPECIALS = 4
GROUP_FRAMES = 5


class TextVocab:
    """Character-level vocabulary with the PAD/BOS/SEP/BOS_SPEECH specials."""

    def __init__(self, chars: str):
        self.chars = chars
        self.index = {c: i + N_SPECIALS for i, c in enumerate(chars)}

    @property
    def size(self) -> int:
        return N_SPECIALS + len(self.chars)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} not in vocabulary") from None


def validate_text_ids(ids: np.ndarray):
    """Enforce the text-token invariants: BOS first, exactly one SEP."""
    ids = np.asarray(ids)
    if ids.size == 0 or ids[0] != BOS:
        raise ValueError("text token sequence must start with BOS")
    if int((ids == SEP).sum()) != 1:
        raise ValueError("text token sequence must contain exactly one SEP")


@dataclass
class ArExample:
    text_ids: np.ndarray       # (Lt,) ends with BOS_SPEECH
    groups: np.ndarray         # (T', 5, D) teacher-forced inputs == frame targets
    tokens: np.ndarray         # (T', G) first-level codes
    teacher_codes: np.ndarray  # (T', G, L)
    feats_len: int

    @property
    def n_steps(self) -> int:
        return self.tokens.shape[0]

    @property
    def bos_speech_pos(self) -> int:
        return len(self.text_ids) - 1

    @property
    def seq_len(self) -> int:
        return len(self.text_ids) + self.n_steps


def build_training_sequence(ref: Utterance, target: Utterance, sparse: SparseBridge,
                            vocab: TextVocab) -> ArExample:
    """Assemble one teacher-forced example from a (reference, target) pair."""
    if not ref.text or not target.text:
        raise ValueError("reference and target transcripts must be non-empty")
    if ref.features.frames.shape[1] != target.features.frames.shape[1]:
        raise ShapeMismatchError("reference and target feature dims differ")
    if ref.features.frame_rate_hz != target.features.frame_rate_hz:
        raise ShapeMismatchError("reference and target frame rates differ")
    text_ids = np.array(
        [BOS] + vocab.encode(ref.text) + [SEP] + vocab.encode(target.text) + [BOS_SPEECH],
        dtype=np.int64,
    )
    validate_text_ids(text_ids)
    feats = np.concatenate([ref.features.frames, target.features.frames], axis=0)
    enc = sparse.encode(feats)
    n_steps = enc.codes.shape[0]
    d = feats.shape[1]
    padded = np.zeros((n_steps * GROUP_FRAMES, d), dtype=np.float32)
    padded[: feats.shape[0]] = feats
    groups = padded.reshape(n_steps, GROUP_FRAMES, d)
    return ArExample(
        text_ids=text_ids,
        groups=groups,
        tokens=enc.codes[:, :, 0],
        teacher_codes=enc.codes,
        feats_len=feats.shape[0],
    )


@dataclass
class ArForward:
    head_logits: list     # per group: Tensor (B, S, K or K+1)
    seq_len: int
    examples: list


class ArModel(Module):
    """Decoder-only transformer over mixed text/speech inputs with G token heads."""

    def __init__(self, vocab_size: int, feature_dim: int, groups: int, codebook_size: int,
                 width: int, n_layers: int, n_heads: int, context: int,
                 rng: np.random.Generator, input_mode: str = "groups"):
        if input_mode not in ("groups", "tokens", "frames"):
            raise ValueError(f"unknown input mode {input_mode!r}")
        self.text_emb = Embedding(vocab_size, width, rng)
        self.pos_emb = Embedding(context, width, rng)
        if input_mode == "groups":
            self.frame_proj = Linear(GROUP_FRAMES * feature_dim, width, rng)
        elif input_mode == "frames":
            self.frame_proj = Linear(feature_dim, width, rng)
        else:
            self.token_embs = [Embedding(codebook_size, width, rng) for _ in range(groups)]
        self.blocks = [TransformerBlock(width, n_heads, rng) for _ in range(n_layers)]
        self.ln_f = LayerNorm(width)
        # head 0 gets the extra EOS class; zero-init makes untrained heads uniform
        self.heads = [
            Linear(width, codebook_size + (1 if g == 0 else 0), rng, zero_init=True)
            for g in range(groups)
        ]
        self.input_mode = input_mode
        self.width = width
        self.groups = groups
        self.codebook_size = codebook_size
        self.feature_dim = feature_dim
        self.context = context
        self.eos_class = codebook_size

    # ------------------------------------------------------------------
    # training forward (tape-friendly, batched)
    # ------------------------------------------------------------------

    def _speech_rows(self, ex: ArExample) -> Tensor:
        if self.input_mode == "groups":
            flat = Tensor(ex.groups.reshape(ex.n_steps, GROUP_FRAMES * self.feature_dim))
            return self.frame_proj(flat)
        if self.input_mode == "tokens":
            rows = ad.embedding(self.token_embs[0].table, ex.tokens[:, 0])
            for g in range(1, self.groups):
                rows = ad.add(rows, ad.embedding(self.token_embs[g].table, ex.tokens[:, g]))
            return rows
        raise ValueError("frame-input models are generation-only")

    def forward_batch(self, examples: list[ArExample]) -> ArForward:
        s_max = max(ex.seq_len for ex in examples)
        if s_max > self.context:
            raise ShapeMismatchError(f"sequence length {s_max} exceeds context {self.context}")
        stacked = []
        for ex in examples:
            text_rows = ad.embedding(self.text_emb.table, ex.text_ids)
            rows = ad.concat([text_rows, self._speech_rows(ex)], axis=0)
            if ex.seq_len < s_max:
                pad_rows = ad.embedding(self.text_emb.table, np.full(s_max - ex.seq_len, PAD, dtype=np.int64))
                rows = ad.concat([rows, pad_rows], axis=0)
            stacked.append(ad.reshape(rows, (1, s_max, self.width)))
        x = ad.concat(stacked, axis=0)
        pos = ad.embedding(self.pos_emb.table, np.arange(s_max, dtype=np.int64))
        x = ad.add(x, pos)
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        return ArForward(head_logits=[head(x) for head in self.heads], seq_len=s_max, examples=examples)

    # ------------------------------------------------------------------
    # losses
    # ------------------------------------------------------------------

    def token_loss(self, out: ArForward) -> tuple[Tensor, float]:
        """Summed per-head mean cross-entropy over speech positions.

        Head 0 sees all predictor positions including the EOS step; the other
        heads have no target at the EOS step and skip it. Text and padding
        positions never contribute. Also returns the teacher-forced accuracy.
        """
        s = out.seq_len
        idx_eos_head, tgt_eos_head = [], []
        idx_rest, tgt_rest = [], []
        for i, ex in enumerate(out.examples):
            base = i * s + ex.bos_speech_pos
            rows = base + np.arange(ex.n_steps + 1)
            idx_eos_head.append(rows)
            tgt_eos_head.append(np.concatenate([ex.tokens[:, 0], [self.eos_class]]))
            idx_rest.append(rows[:-1])
            tgt_rest.append(ex.tokens)
        idx0 = np.concatenate(idx_eos_head)
        tgt0 = np.concatenate(tgt_eos_head)
        idxr = np.concatenate(idx_rest)
        tgtr = np.concatenate(tgt_rest, axis=0)

        terms = []
        correct = 0
        total = 0
        for g, logits in enumerate(out.head_logits):
            flat = ad.reshape(logits, (-1, logits.shape[-1]))
            if g == 0:
                sel = ad.gather_rows(flat, idx0)
                terms.append(ad.softmax_cross_entropy(sel, tgt0))
                correct += int((np.argmax(sel.data, axis=1) == tgt0).sum())
                total += tgt0.size
            else:
                sel = ad.gather_rows(flat, idxr)
                terms.append(ad.softmax_cross_entropy(sel, tgtr[:, g]))
                correct += int((np.argmax(sel.data, axis=1) == tgtr[:, g]).sum())
                total += tgtr.shape[0]
        loss = terms[0]
        for t in terms[1:]:
            loss = ad.add(loss, t)
        return loss, correct / max(total, 1)

    def feature_loss(self, out: ArForward, dense: DenseBridge, books: RvqCodebooks) -> Tensor:
        """Expected-codeword relaxation of the paper-through-the-codec feature match.

        Per step the head softmax (EOS class dropped by slicing before the
        softmax, which renormalizes exactly) weights the level-1 codewords;
        teacher codewords fill levels 2..L. The result decodes through the
        frozen bridge one window per step (batched over all steps of all
        examples) and is compared to the five ground-truth frames of the step.
        """
        s = out.seq_len
        rows = np.concatenate(
            [i * s + ex.bos_speech_pos + np.arange(ex.n_steps) for i, ex in enumerate(out.examples)]
        )
        teacher = np.concatenate([ex.teacher_codes for ex in out.examples], axis=0)
        target = np.concatenate([ex.groups for ex in out.examples], axis=0)
        n = rows.size
        group_vecs = []
        for g, logits in enumerate(out.head_logits):
            flat = ad.reshape(logits, (-1, logits.shape[-1]))
            sel = ad.gather_rows(flat, rows)
            if g == 0:
                sel = ad.slice_axis(sel, -1, 0, self.codebook_size)
            probs = ad.softmax(sel)
            level1 = ad.matmul(probs, Tensor(books.vectors[g, 0]))
            rest = np.zeros((n, books.dim), dtype=np.float32)
            for li in range(1, books.levels):
                rest += books.vectors[g, li][teacher[:, g, li]]
            group_vecs.append(ad.add(level1, Tensor(rest)))
        q = ad.reshape(ad.concat(group_vecs, axis=-1), (n, 1, books.width))
        recon = dense.upsample_refine(q)  # (N, 5, D)
        return ad.mse(recon, Tensor(target))

    # ------------------------------------------------------------------
    # incremental (KV-cached) inference
    # ------------------------------------------------------------------

    def init_cache(self):
        return {"pos": 0, "layers": [{"k": None, "v": None} for _ in self.blocks]}

    def _ln_np(self, ln: LayerNorm, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + ln.eps)
        return ((x - mu) * inv * ln.gain.data + ln.bias.data).astype(np.float32)

    def forward_rows(self, cache, rows: np.ndarray) -> np.ndarray:
        """Append `rows` (n, W) of embedded+positioned input; returns final hidden rows."""
        n, w = rows.shape
        x = rows.astype(np.float32)
        for block, slot in zip(self.blocks, cache["layers"]):
            h = self._ln_np(block.ln1, x)
            attn = block.attn
            q = h @ attn.wq.w.data + attn.wq.b.data
            k = h @ attn.wk.w.data + attn.wk.b.data
            v = h @ attn.wv.w.data + attn.wv.b.data
            nh, hd = attn.n_heads, attn.head_dim
            k = k.reshape(n, nh, hd).transpose(1, 0, 2)
            v = v.reshape(n, nh, hd).transpose(1, 0, 2)
            slot["k"] = k if slot["k"] is None else np.concatenate([slot["k"], k], axis=1)
            slot["v"] = v if slot["v"] is None else np.concatenate([slot["v"], v], axis=1)
            kk, vv = slot["k"], slot["v"]
            tc = kk.shape[1]
            qh = q.reshape(n, nh, hd).transpose(1, 0, 2)
            scores = (qh @ kk.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(hd))
            mask = np.zeros((n, tc), dtype=np.float32)
            prev = tc - n
            for i in range(n):
                mask[i, prev + i + 1 :] = np.float32(-1e9)
            scores = scores + mask[None]
            m = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - m)
            p = e / e.sum(axis=-1, keepdims=True)
            ctx = (p @ vv).transpose(1, 0, 2).reshape(n, w)
            x = x + (ctx @ attn.wo.w.data + attn.wo.b.data)
            h2 = self._ln_np(block.ln2, x)
            mlp = kernels.gelu_fwd(h2 @ block.fc1.w.data + block.fc1.b.data)
            x = x + (mlp @ block.fc2.w.data + block.fc2.b.data)
        cache["pos"] += n
        return self._ln_np(self.ln_f, x)

    def head_logits_np(self, hidden_row: np.ndarray) -> list[np.ndarray]:
        return [hidden_row @ h.w.data + h.b.data for h in self.heads]

    def embed_text_np(self, ids: np.ndarray) -> np.ndarray:
        return self.text_emb.table.data[np.asarray(ids, dtype=np.int64)]

    def embed_frames_np(self, frames: np.ndarray) -> np.ndarray:
        """Project speech input rows: (n, 5, D) groups or (n, D) single frames."""
        flat = frames.reshape(frames.shape[0], -1).astype(np.float32)
        return flat @ self.frame_proj.w.data + self.frame_proj.b.data

    def positions_np(self, start: int, n: int) -> np.ndarray:
        if start + n > self.context:
            raise ShapeMismatchError(f"position {start + n} exceeds context {self.context}")
        return self.pos_emb.table.data[start : start + n]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


@dataclass
class ArSession:
    """Inference state: text context, accumulated features, step bookkeeping."""

    text_ids: np.ndarray
    prompt_features: np.ndarray  # (Tref, D)
    max_steps: int
    suppress_eos: bool = False  # benchmark mode: always emit a full-length output
    generated: np.ndarray = None
    steps: int = 0
    finished: bool = False
    transcript: list = field(default_factory=list)
    forward_passes: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        validate_text_ids(self.text_ids)
        d = self.prompt_features.shape[1]
        self.generated = np.zeros((0, d), dtype=np.float32)


def single_token_decode(dense: DenseBridge, books: RvqCodebooks, token: np.ndarray) -> np.ndarray:
    """One sparse token -> its 5 reconstructed frames (predicted level-2..L codes)."""
    rec = dense.decode(np.asarray(token, dtype=np.int64)[None, :], books)
    return rec.frames


def _entropy(logits: np.ndarray) -> float:
    m = logits.max()
    e = np.exp(logits - m)
    p = e / e.sum()
    return float(-(p * np.log(np.maximum(p, 1e-12))).sum())


def generate(model: ArModel, dense: DenseBridge, books: RvqCodebooks, session: ArSession) -> np.ndarray:
    """Greedy closed-loop generation; returns generated frames (prompt excluded)."""
    if model.feature_dim != session.prompt_features.shape[1]:
        raise ShapeMismatchError(
            f"model feature dim {model.feature_dim} != prompt dim {session.prompt_features.shape[1]}"
        )
    d = model.feature_dim
    cache = model.init_cache()
    rows = [model.embed_text_np(session.text_ids)]
    prompt = session.prompt_features.astype(np.float32)
    if model.input_mode == "groups":
        n_groups = -(-prompt.shape[0] // GROUP_FRAMES)
        padded = np.zeros((n_groups * GROUP_FRAMES, d), dtype=np.float32)
        padded[: prompt.shape[0]] = prompt
        if n_groups:
            rows.append(model.embed_frames_np(padded.reshape(n_groups, GROUP_FRAMES, d)))
    elif model.input_mode == "frames":
        if prompt.shape[0]:
            rows.append(model.embed_frames_np(prompt))
    else:
        raise ValueError("generate() feeds features; token-input models use generate_token_input()")
    stacked = np.concatenate(rows, axis=0)
    stacked = stacked + model.positions_np(0, stacked.shape[0])
    hidden = model.forward_rows(cache, stacked)
    session.forward_passes += 1

    frames_per_step = GROUP_FRAMES if model.input_mode == "groups" else 1
    while not session.finished:
        t0 = time.perf_counter()
        logits = model.head_logits_np(hidden[-1])
        token = np.array([int(np.argmax(lg)) for lg in logits], dtype=np.int64)
        entropies = [_entropy(lg) for lg in logits]
        if token[0] == model.eos_class and session.suppress_eos:
            token[0] = int(np.argmax(logits[0][: model.eos_class]))
        if token[0] == model.eos_class:
            session.finished = True
            session.transcript.append(
                {"step": session.steps + 1, "token": "EOS",
                 "head_entropies": entropies,
                 "ms_elapsed": (time.perf_counter() - t0) * 1e3}
            )
            break
        if model.input_mode == "groups":
            frames = single_token_decode(dense, books, token)
        else:
            if books.dim != d:
                raise ShapeMismatchError(
                    f"trivial decode needs group dim {books.dim} == feature dim {d}")
            frames = trivial_token_decode(books, token)[None, :]
        session.generated = np.concatenate([session.generated, frames], axis=0)
        session.steps += 1
        session.transcript.append(
            {"step": session.steps, "token": [int(c) for c in token],
             "head_entropies": entropies,
             "ms_elapsed": (time.perf_counter() - t0) * 1e3}
        )
        if session.steps >= session.max_steps:
            session.finished = True
            break
        row = model.embed_frames_np(frames.reshape(1, frames_per_step, d))
        row = row + model.positions_np(cache["pos"], 1)
        hidden = model.forward_rows(cache, row)
        session.forward_passes += 1
    return session.generated


def trivial_token_decode(books: RvqCodebooks, token: np.ndarray) -> np.ndarray:
    """Repeat-decoder fallback (no learned bridge): mean of level-1 codewords."""
    vecs = np.stack([books.vectors[g, 0, int(token[g])] for g in range(books.groups)])
    return vecs.mean(axis=0)


def generate_token_input(model: ArModel, books: RvqCodebooks, session: ArSession,
                         prompt_tokens: np.ndarray) -> np.ndarray:
    """Greedy loop for token-input models (no-bridge ablation).

    The feedback is the emitted token's embedding; output frames come from the
    trivial repeat-decoder, five frames per token to keep the rate contract.
    """
    if model.input_mode != "tokens":
        raise ValueError("generate_token_input requires a token-input model")
    cache = model.init_cache()
    rows = [model.embed_text_np(session.text_ids)]
    prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64)
    if prompt_tokens.shape[0]:
        rows.append(_token_rows_np(model, prompt_tokens))
    stacked = np.concatenate(rows, axis=0)
    stacked = stacked + model.positions_np(0, stacked.shape[0])
    hidden = model.forward_rows(cache, stacked)
    session.forward_passes += 1
    while not session.finished:
        t0 = time.perf_counter()
        logits = model.head_logits_np(hidden[-1])
        token = np.array([int(np.argmax(lg)) for lg in logits], dtype=np.int64)
        entropies = [_entropy(lg) for lg in logits]
        if token[0] == model.eos_class and session.suppress_eos:
            token[0] = int(np.argmax(logits[0][: model.eos_class]))
        if token[0] == model.eos_class:
            session.finished = True
            session.transcript.append(
                {"step": session.steps + 1, "token": "EOS", "head_entropies": entropies,
                 "ms_elapsed": (time.perf_counter() - t0) * 1e3}
            )
            break
        frame = trivial_token_decode(books, token)
        frames = np.repeat(frame[None, :], GROUP_FRAMES, axis=0).astype(np.float32)
        session.generated = np.concatenate([session.generated, frames], axis=0)
        session.steps += 1
        session.transcript.append(
            {"step": session.steps, "token": [int(c) for c in token],
             "head_entropies": entropies, "ms_elapsed": (time.perf_counter() - t0) * 1e3}
        )
        if session.steps >= session.max_steps:
            session.finished = True
            break
        row = _token_rows_np(model, token[None, :]) + model.positions_np(cache["pos"], 1)
        hidden = model.forward_rows(cache, row)
        session.forward_passes += 1
    return session.generated


def _token_rows_np(model: ArModel, tokens: np.ndarray) -> np.ndarray:
    rows = model.token_embs[0].table.data[tokens[:, 0]].copy()
    for g in range(1, model.groups):
        rows += model.token_embs[g].table.data[tokens[:, g]]
    return rows
