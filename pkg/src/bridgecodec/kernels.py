"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

Every kernel exists twice: ``<name>_numba`` (compiled, loop-based) and
``<name>_numpy`` (vectorized fallback). The active set is chosen once at
import time: numba is used when importable unless the environment variable
``BRIDGE_NUMBA=0`` forces the numpy path. Both sets stay importable so tests
and benchmarks can compare them directly.

Shape conventions: sequences are (B, T, C) row-major float32/float64 arrays,
conv kernels are (k, C_in, C_out). Nearest-codeword search always accumulates
squared distances in float64 so tie-breaking matches the brute-force oracle.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap(args[0]) if args and callable(args[0]) else wrap


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def conv1d_fwd_numpy(xp, w, stride):
    """xp (B,Tp,Ci) already padded, w (k,Ci,Co) -> (B,To,Co)."""
    b, tp, ci = xp.shape
    k = w.shape[0]
    to = (tp - k) // stride + 1
    out = np.zeros((b, to, w.shape[2]), dtype=xp.dtype)
    for j in range(k):
        out += xp[:, j : j + (to - 1) * stride + 1 : stride, :] @ w[j]
    return out


def conv1d_bwd_input_numpy(g, w, stride, tp):
    """g (B,To,Co), w (k,Ci,Co) -> grad wrt padded input (B,Tp,Ci)."""
    b, to, _ = g.shape
    k = w.shape[0]
    gx = np.zeros((b, tp, w.shape[1]), dtype=g.dtype)
    for j in range(k):
        gx[:, j : j + (to - 1) * stride + 1 : stride, :] += g @ w[j].T
    return gx

def conv1d_bwd_kernel_numpy(xp, g, stride, k):
    """xp (B,Tp,Ci), g (B,To,Co) -> grad wrt kernel (k,Ci,Co)."""
    to = g.shape[1]
    gw = np.zeros((k, xp.shape[2], g.shape[2]), dtype=g.dtype)
    for j in range(k):
        xs = xp[:, j : j + (to - 1) * stride + 1 : stride, :]
        gw[j] = np.einsum("bti,bto->io", xs, g)
    return gw


def convt1d_fwd_numpy(x, w, stride):
    """x (B,T,Ci), w (k,Ci,Co) -> (B,(T-1)*stride+k,Co)."""
    b, t, _ = x.shape
    k = w.shape[0]
    to = (t - 1) * stride + k
    out = np.zeros((b, to, w.shape[2]), dtype=x.dtype)
    for j in range(k):
        out[:, j : j + (t - 1) * stride + 1 : stride, :] += x @ w[j]
    return out


def convt1d_bwd_input_numpy(g, w, stride):
    """g (B,To,Co), w (k,Ci,Co) -> grad wrt x (B,T,Ci)."""
    k = w.shape[0]
    t = (g.shape[1] - k) // stride + 1
    gx = np.zeros((g.shape[0], t, w.shape[1]), dtype=g.dtype)
    for j in range(k):
        gx += g[:, j : j + (t - 1) * stride + 1 : stride, :] @ w[j].T
    return gx


def convt1d_bwd_kernel_numpy(x, g, stride, k):
    """x (B,T,Ci), g (B,To,Co) -> grad wrt kernel (k,Ci,Co)."""
    t = x.shape[1]
    gw = np.zeros((k, x.shape[2], g.shape[2]), dtype=g.dtype)
    for j in range(k):
        gs = g[:, j : j + (t - 1) * stride + 1 : stride, :]
        gw[j] = np.einsum("bti,bto->io", x, gs)
    return gw


def nearest_code_numpy(res, cb):
    """res (N,d), cb (K,d), both float64 -> argmin_k ||res - cb_k||^2, ties -> lowest k."""
    d2 = ((res[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


def code_stats_numpy(res, codes, k):
    """Per-code assignment counts and vector sums for EMA updates."""
    counts = np.bincount(codes, minlength=k).astype(res.dtype)
    sums = np.zeros((k, res.shape[1]), dtype=res.dtype)
    np.add.at(sums, codes, res)
    return counts, sums


def gelu_fwd_numpy(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype)


def gelu_bwd_numpy(x, g):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x2))
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)).astype(x.dtype)


# ---------------------------------------------------------------------------
# numba implementations (same contracts, explicit loops)
# ---------------------------------------------------------------------------


@njit(cache=True)
def conv1d_fwd_numba(xp, w, stride):
    b, tp, ci = xp.shape
    k, _, co = w.shape
    to = (tp - k) // stride + 1
    out = np.zeros((b, to, co), dtype=xp.dtype)
    for n in range(b):
        for t in range(to):
            base = t * stride
            for j in range(k):
                for i in range(ci):
                    v = xp[n, base + j, i]
                    if v != 0.0:
                        for o in range(co):
                            out[n, t, o] += v * w[j, i, o]
    return out


@njit(cache=True)
def conv1d_bwd_input_numba(g, w, stride, tp):
    b, to, co = g.shape
    k, ci, _ = w.shape
    gx = np.zeros((b, tp, ci), dtype=g.dtype)
    for n in range(b):
        for t in range(to):
            base = t * stride
            for j in range(k):
                for i in range(ci):
                    acc = gx[n, base + j, i]
                    for o in range(co):
                        acc += g[n, t, o] * w[j, i, o]
                    gx[n, base + j, i] = acc
    return gx


@njit(cache=True)
def conv1d_bwd_kernel_numba(xp, g, stride, k):
    b, to, co = g.shape
    ci = xp.shape[2]
    gw = np.zeros((k, ci, co), dtype=g.dtype)
    for n in range(b):
        for t in range(to):
            base = t * stride
            for j in range(k):
                for i in range(ci):
                    v = xp[n, base + j, i]
                    if v != 0.0:
                        for o in range(co):
                            gw[j, i, o] += v * g[n, t, o]
    return gw


@njit(cache=True)
def convt1d_fwd_numba(x, w, stride):
    b, t, ci = x.shape
    k, _, co = w.shape
    to = (t - 1) * stride + k
    out = np.zeros((b, to, co), dtype=x.dtype)
    for n in range(b):
        for s in range(t):
            base = s * stride
            for j in range(k):
                for i in range(ci):
                    v = x[n, s, i]
                    if v != 0.0:
                        for o in range(co):
                            out[n, base + j, o] += v * w[j, i, o]
    return out


@njit(cache=True)
def convt1d_bwd_input_numba(g, w, stride):
    b, to, co = g.shape
    k, ci, _ = w.shape
    t = (to - k) // stride + 1
    gx = np.zeros((b, t, ci), dtype=g.dtype)
    for n in range(b):
        for s in range(t):
            base = s * stride
            for j in range(k):
                for i in range(ci):
                    acc = gx[n, s, i]
                    for o in range(co):
                        acc += g[n, base + j, o] * w[j, i, o]
                    gx[n, s, i] = acc
    return gx


@njit(cache=True)
def convt1d_bwd_kernel_numba(x, g, stride, k):
    b, t, ci = x.shape
    co = g.shape[2]
    gw = np.zeros((k, ci, co), dtype=g.dtype)
    for n in range(b):
        for s in range(t):
            base = s * stride
            for j in range(k):
                for i in range(ci):
                    v = x[n, s, i]
                    if v != 0.0:
                        for o in range(co):
                            gw[j, i, o] += v * g[n, base + j, o]
    return gw


@njit(cache=True)
def nearest_code_numba(res, cb):
    n, d = res.shape
    k = cb.shape[0]
    codes = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        best_d = np.inf
        for c in range(k):
            acc = 0.0
            for j in range(d):
                diff = res[i, j] - cb[c, j]
                acc += diff * diff
            if acc < best_d:
                best_d = acc
                best = c
        codes[i] = best
    return codes


@njit(cache=True)
def code_stats_numba(res, codes, k):
    n, d = res.shape
    counts = np.zeros(k, dtype=res.dtype)
    sums = np.zeros((k, d), dtype=res.dtype)
    for i in range(n):
        c = codes[i]
        counts[c] += 1.0
        for j in range(d):
            sums[c, j] += res[i, j]
    return counts, sums


@njit(cache=True)
def gelu_fwd_numba(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        inner = _GELU_C * (v + _GELU_A * v * v * v)
        out[i] = 0.5 * v * (1.0 + math.tanh(inner))
    return out.reshape(x.shape)


@njit(cache=True)
def gelu_bwd_numba(x, g):
    flat = x.ravel()
    gf = g.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        v2 = v * v
        t = math.tanh(_GELU_C * (v + _GELU_A * v * v2))
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
        out[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_NUMPY_SET = {
    "conv1d_fwd": conv1d_fwd_numpy,
    "conv1d_bwd_input": conv1d_bwd_input_numpy,
    "conv1d_bwd_kernel": conv1d_bwd_kernel_numpy,
    "convt1d_fwd": convt1d_fwd_numpy,
    "convt1d_bwd_input": convt1d_bwd_input_numpy,
    "convt1d_bwd_kernel": convt1d_bwd_kernel_numpy,
    "nearest_code": nearest_code_numpy,
    "code_stats": code_stats_numpy,
    "gelu_fwd": gelu_fwd_numpy,
    "gelu_bwd": gelu_bwd_numpy,
}

_NUMBA_SET = {
    "conv1d_fwd": conv1d_fwd_numba,
    "conv1d_bwd_input": conv1d_bwd_input_numba,
    "conv1d_bwd_kernel": conv1d_bwd_kernel_numba,
    "convt1d_fwd": convt1d_fwd_numba,
    "convt1d_bwd_input": convt1d_bwd_input_numba,
    "convt1d_bwd_kernel": convt1d_bwd_kernel_numba,
    "nearest_code": nearest_code_numba,
    "code_stats": code_stats_numba,
    "gelu_fwd": gelu_fwd_numba,
    "gelu_bwd": gelu_bwd_numba,
}


def _pick_backend():
    flag = os.environ.get("BRIDGE_NUMBA", "").strip()
    if flag == "0":
        return "numpy"
    if flag == "1" and not HAS_NUMBA:
        raise RuntimeError("BRIDGE_NUMBA=1 but numba is not importable")
    return "numba" if HAS_NUMBA else "numpy"


BACKEND = _pick_backend()
_ACTIVE = _NUMBA_SET if BACKEND == "numba" else _NUMPY_SET

conv1d_fwd = _ACTIVE["conv1d_fwd"]
conv1d_bwd_input = _ACTIVE["conv1d_bwd_input"]
conv1d_bwd_kernel = _ACTIVE["conv1d_bwd_kernel"]
convt1d_fwd = _ACTIVE["convt1d_fwd"]
convt1d_bwd_input = _ACTIVE["convt1d_bwd_input"]
convt1d_bwd_kernel = _ACTIVE["convt1d_bwd_kernel"]
nearest_code = _ACTIVE["nearest_code"]
code_stats = _ACTIVE["code_stats"]
gelu_fwd = _ACTIVE["gelu_fwd"]
gelu_bwd = _ACTIVE["gelu_bwd"]


def backend_name() -> str:
    return BACKEND


def implementation_pairs():
    """(name, numpy_impl, numba_impl) triples for agreement tests and benchmarks."""
    return [(name, _NUMPY_SET[name], _NUMBA_SET[name]) for name in sorted(_NUMPY_SET)]
