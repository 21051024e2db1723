"""Independent oracles and the gradient/brute-force verification suite.

The reference implementations here are deliberately naive (triple loops,
exhaustive searches, float64) and never call the fast kernels, so they can
arbitrate correctness. `run_suite` drives every finite-difference check and
every brute-force equivalence check; the CLI `gradcheck` command exits
nonzero if any entry fails.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ArConfig, BridgeConfig, Config, CorpusConfig, TrainConfig
from .dense_bridge import DenseBridge, rvq_decode
from .features import SyntheticCorpusSpec, generate_corpus
from .gradcheck import check_gradients, relative_error
from .layers import CausalSelfAttention, Module, TransformerBlock
from .sparse_bridge import RvqCodebooks, SparseBridge, rvq_encode_batch
from .training import build_ar, build_bridges, build_examples


# ---------------------------------------------------------------------------
# naive reference implementations
# ---------------------------------------------------------------------------


def naive_conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                 stride: int = 1, padding: str = "same") -> np.ndarray:
    """Direct O(T*k*Cin*Cout) cross-correlation; float64 accumulation."""
    t, ci = x.shape
    k, _, co = w.shape
    left = (k - 1) // 2 if padding == "same" else 0
    right = (k - 1 - left) if padding == "same" else 0
    xp = np.zeros((t + left + right, ci), dtype=np.float64)
    xp[left : left + t] = x
    to = (xp.shape[0] - k) // stride + 1
    out = np.zeros((to, co), dtype=np.float64)
    for ot in range(to):
        for j in range(k):
            for i in range(ci):
                v = xp[ot * stride + j, i]
                for o in range(co):
                    out[ot, o] += v * w[j, i, o]
    if b is not None:
        out += b
    return out


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += float(a[i, l]) * float(b[l, j])
            out[i, j] = acc
    return out


def naive_mse(a: np.ndarray, b: np.ndarray) -> float:
    acc = 0.0
    fa, fb = a.reshape(-1), b.reshape(-1)
    for i in range(fa.size):
        d = float(fa[i]) - float(fb[i])
        acc += d * d
    return acc / fa.size


def naive_rvq_encode(frame: np.ndarray, books: RvqCodebooks):
    """Exhaustive nearest-neighbor search level by level; ties -> lowest index."""
    g, l, d = books.groups, books.levels, books.dim
    codes = np.zeros((g, l), dtype=np.int64)
    quant = np.zeros(g * d, dtype=np.float64)
    for gi in range(g):
        r = frame[gi * d : (gi + 1) * d].astype(np.float64).copy()
        for li in range(l):
            best, best_d = 0, np.inf
            for k in range(books.codebook_size):
                dist = float(((r - books.vectors[gi, li, k].astype(np.float64)) ** 2).sum())
                if dist < best_d:
                    best, best_d = k, dist
            codes[gi, li] = best
            r -= books.vectors[gi, li, best].astype(np.float64)
            quant[gi * d : (gi + 1) * d] += books.vectors[gi, li, best]
    return codes, quant


# ---------------------------------------------------------------------------
# helpers for float64 model checks
# ---------------------------------------------------------------------------


def promote_f64(module: Module):
    for p in module.params():
        p.data = p.data.astype(np.float64)


def randomize_params(module: Module, rng: np.random.Generator, scale: float = 0.3):
    """Replace every parameter (including zero-inits) with random values."""
    for p in module.params():
        p.data = rng.normal(0.0, scale, size=p.data.shape).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# elementary op gradient checks
# ---------------------------------------------------------------------------


def _t64(rng, *shape, grad=True):
    return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=grad, dtype=np.float64)


def _op_cases(rng: np.random.Generator):
    """(name, params dict, build_loss) triples covering every differentiable op."""
    cases = []

    x = _t64(rng, 9, 3)
    w = _t64(rng, 3, 3, 4)
    b = _t64(rng, 4)
    cases.append(("conv1d_same", {"x": x, "w": w, "b": b},
                  lambda: ad.mean_all(ad.conv1d(x, w, b, padding="same"))))

    x2 = _t64(rng, 10, 2)
    w2 = _t64(rng, 5, 2, 3)
    b2 = _t64(rng, 3)
    cases.append(("conv1d_valid_stride5", {"x": x2, "w": w2, "b": b2},
                  lambda: ad.mean_all(ad.conv1d(x2, w2, b2, stride=5, padding="valid"))))

    xt = _t64(rng, 3, 2)
    wt = _t64(rng, 5, 2, 3)
    bt = _t64(rng, 3)
    cases.append(("conv1d_transpose_k5s5", {"x": xt, "w": wt, "b": bt},
                  lambda: ad.mean_all(ad.conv1d_transpose(xt, wt, bt, stride=5))))

    xl = _t64(rng, 4, 3)
    wl = _t64(rng, 3, 2)
    bl = _t64(rng, 2)
    cases.append(("linear", {"x": xl, "w": wl, "b": bl},
                  lambda: ad.mean_all(ad.linear(xl, wl, bl))))

    ma = _t64(rng, 2, 3, 4)
    mb = _t64(rng, 2, 4, 5)
    cases.append(("matmul_batched", {"a": ma, "b": mb},
                  lambda: ad.mean_all(ad.matmul(ma, mb))))

    lg = _t64(rng, 5, 8)
    tg = rng.integers(0, 8, size=5)
    cases.append(("softmax_cross_entropy", {"logits": lg},
                  lambda: ad.softmax_cross_entropy(lg, tg)))

    sa = _t64(rng, 4, 6)
    cw = rng.normal(size=(4, 6))
    cases.append(("softmax", {"x": sa},
                  lambda: ad.mean_all(ad.mul(ad.softmax(sa), Tensor(cw, dtype=np.float64)))))

    m1 = _t64(rng, 6, 3)
    m2 = _t64(rng, 6, 3)
    cases.append(("mse", {"a": m1, "b": m2}, lambda: ad.mse(m1, m2)))

    xn = _t64(rng, 4, 5)
    gn = _t64(rng, 5)
    bn = _t64(rng, 5)
    wn = Tensor(rng.normal(size=(4, 5)), dtype=np.float64)
    cases.append(("layer_norm", {"x": xn, "gain": gn, "bias": bn},
                  lambda: ad.mean_all(ad.mul(ad.layer_norm(xn, gn, bn), wn))))

    xg = _t64(rng, 7, 3)
    cases.append(("gelu", {"x": xg}, lambda: ad.mean_all(ad.gelu(xg))))

    xr = _t64(rng, 7, 3)
    cases.append(("relu", {"x": xr}, lambda: ad.mean_all(ad.relu(xr))))

    tbl = _t64(rng, 6, 4)
    ids = rng.integers(0, 6, size=(5,))
    we = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)
    cases.append(("embedding_lookup", {"table": tbl},
                  lambda: ad.mean_all(ad.mul(ad.embedding(tbl, ids), we))))

    xr2 = _t64(rng, 8, 3)
    rows = rng.integers(0, 8, size=(6,))
    wg = Tensor(rng.normal(size=(6, 3)), dtype=np.float64)
    cases.append(("gather_rows", {"x": xr2},
                  lambda: ad.mean_all(ad.mul(ad.gather_rows(xr2, rows), wg))))

    c1 = _t64(rng, 5, 2)
    c2 = _t64(rng, 5, 3)
    cases.append(("concat_slice", {"a": c1, "b": c2},
                  lambda: ad.mean_all(ad.slice_axis(ad.concat([c1, c2], axis=-1), -1, 1, 4))))

    pe = _t64(rng, 4, 3)
    wpe = Tensor(rng.normal(size=(7, 3)), dtype=np.float64)
    cases.append(("pad_time_edge", {"x": pe},
                  lambda: ad.mean_all(ad.mul(ad.pad_time_edge(pe, 3), wpe))))

    pz = _t64(rng, 4, 3)
    wpz = Tensor(rng.normal(size=(6, 3)), dtype=np.float64)
    cases.append(("pad_time_zero", {"x": pz},
                  lambda: ad.mean_all(ad.mul(ad.pad_time_zero(pz, 2), wpz))))

    return cases


def check_ops(seed: int, rtol: float = 1e-4) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    errors = {}
    for name, params, build in _op_cases(rng):
        errs = check_gradients(build, params, rtol=rtol)
        errors[name] = max(errs.values())
    return errors


def check_attention(seed: int, rtol: float = 1e-4) -> float:
    rng = np.random.default_rng(seed)
    attn = CausalSelfAttention(width=8, n_heads=2, rng=rng)
    block = TransformerBlock(width=8, n_heads=2, rng=rng, mlp_ratio=2)
    promote_f64(attn)
    promote_f64(block)
    x = _t64(rng, 1, 5, 8)
    weights = rng.normal(size=(1, 5, 8))

    def loss_attn():
        return ad.mean_all(ad.mul(attn(x), Tensor(weights, dtype=np.float64)))

    def loss_block():
        return ad.mean_all(ad.mul(block(x), Tensor(weights, dtype=np.float64)))

    e1 = check_gradients(loss_attn, {"x": x, **{f"attn.{k}": v for k, v in attn.named_params().items()}}, rtol=rtol)
    e2 = check_gradients(loss_block, {"x": x, **{f"block.{k}": v for k, v in block.named_params().items()}}, rtol=rtol)
    return max(max(e1.values()), max(e2.values()))


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------


def _tiny_config(seed: int) -> Config:
    return Config(
        corpus=CorpusConfig(n_utterances=4, feature_dim=2, frames_per_char=5,
                            min_text_len=2, max_text_len=3, vocabulary="ab",
                            n_speakers=1, seed=seed),
        bridge=BridgeConfig(groups=3, levels=3, codebook_size=3, predictor_embed=2,
                            predictor_hidden=3, seed=seed + 1),
        ar=ArConfig(layers=1, heads=2, width=8, context=64, seed=seed + 2),
        train=TrainConfig(seed=seed + 3),
    )


def frozen_bridge_loss(sparse: SparseBridge, dense: DenseBridge, frames_list,
                       base: list) -> Tensor:
    """Bridge loss with quantization decisions frozen at the base point.

    `base` holds (codes, quantized, f2_base) per utterance. The decode input is
    f2 + (quantized - f2_base), which equals the quantized features at the base
    point and carries the identity Jacobian the straight-through estimator
    defines, so central differences of this function match the tape exactly.
    """
    terms = []
    for frames, (codes, quant, f2_base) in zip(frames_list, base):
        x = Tensor(frames, dtype=np.float64)
        t = frames.shape[0]
        _, f2 = sparse.compress(x)
        delta = quant.astype(np.float64) - f2_base.astype(np.float64)
        l_align = ad.mse(f2, Tensor(quant, dtype=np.float64))
        q_in = ad.add_const(f2, delta)
        recon = dense.upsample_refine(q_in)
        l_recon = ad.mse(ad.slice_axis(recon, -2, 0, t), x)
        pred = dense.predictor(codes[:, :, 0], teacher_codes=codes)
        cells = [ad.softmax_cross_entropy(pred.logits[(gi, level)], codes[:, gi, level - 1])
                 for gi in range(sparse.codebooks.groups)
                 for level in range(2, sparse.codebooks.levels + 1)]
        term = l_align
        term = ad.add(term, l_recon)
        for c in cells:
            term = ad.add(term, c)
        terms.append(term)
    total = terms[0]
    for t_ in terms[1:]:
        total = ad.add(total, t_)
    return ad.scale(total, 1.0 / len(terms))


def check_bridge_composite(seed: int, rtol: float = 1e-4) -> float:
    """FD check of the full codec training objective wrt every bridge parameter."""
    cfg = _tiny_config(seed)
    rng = np.random.default_rng(seed)
    sparse, dense = build_bridges(cfg)
    randomize_params(sparse, rng)
    randomize_params(dense, rng)
    books = sparse.codebooks
    books.vectors = rng.normal(0.0, 0.5, size=books.vectors.shape).astype(np.float32)
    books.vectors[:, :, 0, :] = 0.0
    promote_f64(sparse)
    promote_f64(dense)
    utts = generate_corpus(cfg.corpus.to_spec())[:2]
    frames_list = [u.features.frames for u in utts]

    base = []
    for frames in frames_list:
        _, f2 = sparse.compress(Tensor(frames, dtype=np.float64))
        rvq = rvq_encode_batch(f2.data.astype(np.float32), books)
        base.append((rvq.codes, rvq.quantized, f2.data.copy()))

    params = {f"sparse.{k}": v for k, v in sparse.named_params().items()}
    params.update({f"dense.{k}": v for k, v in dense.named_params().items()})
    errs = check_gradients(lambda: frozen_bridge_loss(sparse, dense, frames_list, base),
                           params, rtol=rtol)
    return max(errs.values())


def check_ar_composite(seed: int, rtol: float = 1e-4) -> float:
    """FD check of L_token + L_features wrt every generator parameter."""
    cfg = _tiny_config(seed)
    rng = np.random.default_rng(seed)
    sparse, dense = build_bridges(cfg)
    randomize_params(sparse, rng, scale=0.2)
    randomize_params(dense, rng, scale=0.2)
    books = sparse.codebooks
    books.vectors = rng.normal(0.0, 0.5, size=books.vectors.shape).astype(np.float32)
    books.vectors[:, :, 0, :] = 0.0
    sparse.set_requires_grad(False)
    dense.set_requires_grad(False)
    promote_f64(dense)

    model, vocab = build_ar(cfg)
    randomize_params(model, rng, scale=0.2)
    promote_f64(model)
    utts = generate_corpus(cfg.corpus.to_spec())[:2]
    examples = build_examples(cfg, utts, sparse, vocab, rng)

    def build_loss():
        fwd = model.forward_batch(examples)
        l_token, _ = model.token_loss(fwd)
        l_feat = model.feature_loss(fwd, dense, books)
        return ad.add(l_token, l_feat)

    errs = check_gradients(build_loss, model.named_params(), rtol=rtol)
    return max(errs.values())


def check_frozen_bridge_gradients(seed: int) -> bool:
    """The generator loss must put exactly zero gradient on bridge parameters."""
    cfg = _tiny_config(seed)
    rng = np.random.default_rng(seed)
    sparse, dense = build_bridges(cfg)
    randomize_params(dense, rng, scale=0.2)
    books = sparse.codebooks
    books.vectors = rng.normal(0.0, 0.5, size=books.vectors.shape).astype(np.float32)
    books.vectors[:, :, 0, :] = 0.0
    sparse.set_requires_grad(False)
    dense.set_requires_grad(False)
    model, vocab = build_ar(cfg)
    utts = generate_corpus(cfg.corpus.to_spec())[:2]
    examples = build_examples(cfg, utts, sparse, vocab, rng)
    with Tape() as tape:
        fwd = model.forward_batch(examples)
        l_token, _ = model.token_loss(fwd)
        l_feat = model.feature_loss(fwd, dense, books)
        tape.backward(ad.add(l_token, l_feat))
    for p in list(sparse.params()) + list(dense.params()):
        if tape.grad(p) is not None and np.any(tape.grad(p)):
            return False
    return True


# ---------------------------------------------------------------------------
# brute-force RVQ equivalence
# ---------------------------------------------------------------------------


def random_codebooks(rng: np.random.Generator, groups=3, levels=3, k=8, dim=4) -> RvqCodebooks:
    books = RvqCodebooks(groups, levels, k, dim)
    books.vectors = rng.normal(0.0, 1.0, size=books.vectors.shape).astype(np.float32)
    books.vectors[:, :, 0, :] = 0.0
    books._bootstrapped = True
    return books


def check_rvq_oracle(seed: int, n_frames: int = 1000, k: int = 8) -> tuple[int, int]:
    """Fast path vs exhaustive search; returns (#matching frames, n_frames)."""
    rng = np.random.default_rng(seed)
    books = random_codebooks(rng, k=k)
    frames = rng.normal(0.0, 1.0, size=(n_frames, books.width)).astype(np.float32)
    fast = rvq_encode_batch(frames, books)
    matches = 0
    for i in range(n_frames):
        codes, quant = naive_rvq_encode(frames[i], books)
        if np.array_equal(codes, fast.codes[i]):
            matches += 1
    return matches, n_frames


def check_monotone_refinement(seed: int, n_frames: int = 1000, k: int = 8) -> bool:
    """Reconstruction MSE using levels 1..l never increases with l, per frame."""
    rng = np.random.default_rng(seed)
    books = random_codebooks(rng, k=k)
    frames = rng.normal(0.0, 1.0, size=(n_frames, books.width)).astype(np.float32)
    res = rvq_encode_batch(frames, books)
    prev = np.full(n_frames, np.inf)
    for level in range(1, books.levels + 1):
        partial = np.zeros_like(frames)
        for gi in range(books.groups):
            acc = np.zeros((n_frames, books.dim), dtype=np.float32)
            for li in range(level):
                acc += books.vectors[gi, li][res.codes[:, gi, li]]
            partial[:, gi * books.dim : (gi + 1) * books.dim] = acc
        err = ((frames - partial) ** 2).mean(axis=1)
        if np.any(err > prev + 1e-7):
            return False
        prev = err
    return True


# ---------------------------------------------------------------------------
# suite driver
# ---------------------------------------------------------------------------


def run_suite(n_seeds: int = 20, rtol: float = 1e-4, emit=None) -> list[dict]:
    """Run every oracle check; returns [{name, passed, detail}] records."""
    results = []

    def record(name, passed, detail):
        results.append({"name": name, "passed": bool(passed), "detail": detail})
        if emit:
            emit(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")

    worst: dict[str, float] = {}
    ok = True
    try:
        for seed in range(n_seeds):
            for name, err in check_ops(seed, rtol=rtol).items():
                worst[name] = max(worst.get(name, 0.0), err)
    except AssertionError as e:
        ok = False
        record("ops_finite_difference", False, str(e))
    if ok:
        for name in sorted(worst):
            record(f"grad_{name}", worst[name] < rtol, f"max rel err {worst[name]:.2e} over {n_seeds} seeds")

    try:
        err = max(check_attention(seed, rtol=rtol) for seed in range(n_seeds))
        record("grad_attention_block", err < rtol, f"max rel err {err:.2e} over {n_seeds} seeds")
    except AssertionError as e:
        record("grad_attention_block", False, str(e))

    try:
        err = max(check_bridge_composite(seed, rtol=rtol) for seed in range(n_seeds))
        record("grad_codec_loss_composite", err < rtol, f"max rel err {err:.2e} over {n_seeds} seeds")
    except AssertionError as e:
        record("grad_codec_loss_composite", False, str(e))

    try:
        err = max(check_ar_composite(seed, rtol=rtol) for seed in range(n_seeds))
        record("grad_generator_loss_composite", err < rtol, f"max rel err {err:.2e} over {n_seeds} seeds")
    except AssertionError as e:
        record("grad_generator_loss_composite", False, str(e))

    record("frozen_bridge_zero_grad", check_frozen_bridge_gradients(0), "bridge params receive no generator gradient")

    matches, total = check_rvq_oracle(0)
    record("rvq_exhaustive_equivalence", matches == total, f"{matches}/{total} frames match brute force")

    record("rvq_monotone_refinement", check_monotone_refinement(0), "per-frame MSE non-increasing across levels")

    return results
