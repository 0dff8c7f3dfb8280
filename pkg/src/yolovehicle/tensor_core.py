"""Minimal dense tensor kernels: activations, matmul, naive conv, gradient checking.

All public entry points work on plain numpy arrays. Values created by this
package are float32 row-major; the math itself is dtype-preserving so the
finite-difference gradient checker can run the same code paths in float64.
"""

from __future__ import annotations

import math
import struct

import numpy as np

DTYPE = np.float32

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)


class Rng:
    """splitmix64 stream; same seed gives the same values on every platform."""

    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self.state + idx * _SPLITMIX_GAMMA
            self.state = z[-1]
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        """Uniform floats in [low, high), float32, deterministic per seed."""
        n = int(np.prod(shape)) if shape else 1
        bits = self._raw(n)
        u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        vals = (low + (high - low) * u).astype(DTYPE)
        return vals.reshape(shape) if shape else vals[0]

    def integers(self, n_values: int, count: int) -> np.ndarray:
        """count indices in [0, n_values), via modulo (fine for small ranges)."""
        return (self._raw(count) % np.uint64(n_values)).astype(np.int64)


def init_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    """Symmetric uniform(-r, r) with r = sqrt(1/fan_in)."""
    r = math.sqrt(1.0 / fan_in)
    return rng.uniform(-r, r, tuple(shape))


# ---------------------------------------------------------------------------
# core ops


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    if axis >= v.ndim or axis < -v.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {v.ndim}")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output y."""
    dot = np.sum(grad_out * y, axis=axis, keepdims=True)
    return y * (grad_out - dot)


def sigmoid(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out.astype(v.dtype)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


def leaky_relu(v: np.ndarray, slope: float = 0.01) -> np.ndarray:
    if not (0.0 < slope < 1.0):
        raise ValueError(f"leaky slope must be in (0,1), got {slope}")
    return np.where(v > 0, v, slope * v).astype(v.dtype)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = 0.01) -> np.ndarray:
    return np.where(x > 0, grad_out, slope * grad_out).astype(grad_out.dtype)


def clamp01(v: np.ndarray) -> np.ndarray:
    return np.clip(v, 0.0, 1.0)


def clamp01_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    mask = (x >= 0.0) & (x <= 1.0)
    return np.where(mask, grad_out, 0.0).astype(grad_out.dtype)


# ---------------------------------------------------------------------------
# convolution (cross-correlation), CHW single image


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((c * kh * kw, ho * wo), dtype=x.dtype)
    idx = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = xp[ci, i : i + stride * ho : stride, j : j + stride * wo : stride]
                cols[idx] = patch.reshape(-1)
                idx += 1
    return cols, ho, wo


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate x [C,H,W] with kernels [O,C,kh,kw] -> [O,H',W']."""
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects CHW input and OCKK kernels, got {x.shape}, {kernels.shape}")
    o, c, kh, kw = kernels.shape
    if c != x.shape[0]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = kernels.reshape(o, -1) @ cols
    return out.reshape(o, ho, wo)


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, pad: int = 0):
    """Returns (grad_x, grad_kernels) for conv2d."""
    o, c, kh, kw = kernels.shape
    ho, wo = grad_out.shape[1:]
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    g = grad_out.reshape(o, -1)
    grad_k = (g @ cols.T).reshape(kernels.shape)
    # col2im for grad wrt input
    grad_cols = kernels.reshape(o, -1).T @ g  # [c*kh*kw, ho*wo]
    h, w = x.shape[1:]
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    idx = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                gxp[ci, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    grad_cols[idx].reshape(ho, wo)
                )
                idx += 1
    if pad:
        gxp = gxp[:, pad:-pad, pad:-pad]
    return gxp, grad_k


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """[C,H,W] -> [1,C] channel means."""
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool expects CHW, got {x.shape}")
    return x.mean(axis=(1, 2), dtype=x.dtype).reshape(1, -1)


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    c, h, w = x_shape
    per = grad_out.reshape(c, 1, 1) / (h * w)
    return np.broadcast_to(per, (c, h, w)).astype(grad_out.dtype).copy()


# ---------------------------------------------------------------------------
# scaled dot-product attention (shared by fusion / text encoder / windowed MSA)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes batch.

    Returns (out, cache) where cache feeds attention_backward.
    """
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    w = softmax(logits, axis=-1)
    out = np.matmul(w, v)
    return out, (q, k, v, w, scale)


def attention_backward(cache, grad_out: np.ndarray):
    q, k, v, w, scale = cache
    grad_v = np.matmul(np.swapaxes(w, -1, -2), grad_out)
    grad_w = np.matmul(grad_out, np.swapaxes(v, -1, -2))
    grad_logits = softmax_backward(w, grad_w, axis=-1) * scale
    grad_q = np.matmul(grad_logits, k)
    grad_k = np.matmul(np.swapaxes(grad_logits, -1, -2), q)
    return grad_q, grad_k, grad_v


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """[..., T, d] -> [..., heads, T, d/heads]."""
    if x.shape[-1] % heads:
        raise ValueError(f"head count {heads} does not divide dim {x.shape[-1]}")
    t, d = x.shape[-2], x.shape[-1]
    parts = x.reshape(x.shape[:-2] + (t, heads, d // heads))
    return np.swapaxes(parts, -3, -2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """Inverse of split_heads."""
    y = np.swapaxes(x, -3, -2)
    t = y.shape[-3]
    return y.reshape(y.shape[:-3] + (t, y.shape[-2] * y.shape[-1]))


def multi_head_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int):
    """Heads split along the feature dim; no projections. Returns (out, cache)."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    out_h, cache = attention(qh, kh, vh)
    return merge_heads(out_h), (cache, heads)


def multi_head_attention_backward(cache, grad_out: np.ndarray):
    inner, heads = cache
    g = split_heads(grad_out, heads)
    gq, gk, gv = attention_backward(inner, g)
    return merge_heads(gq), merge_heads(gk), merge_heads(gv)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: np.ndarray, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    f(x) must return (scalar_value, gradient_wrt_x). The check is run in
    float64 so the finite differences resolve the stated tolerances.
    """
    if not (1e-4 <= eps <= 1e-2):
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    x = np.asarray(x, dtype=np.float64)
    value, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise ValueError("non-finite evaluation in grad_check")
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp, _ = f(x)
        flat[i] = orig - eps
        fm, _ = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite evaluation in grad_check")
        nflat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# TSR tensor file format and the named-tensor archive

_TSR_MAGIC = b"TSR1"


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"TSR supports rank 1-4, got rank {arr.ndim}")
    head = _TSR_MAGIC + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Returns (array, next_offset)."""
    if buf[offset : offset + 4] != _TSR_MAGIC:
        raise ValueError("bad TSR magic")
    rank = buf[offset + 4]
    if not 1 <= rank <= 4:
        raise ValueError(f"bad TSR rank {rank}")
    pos = offset + 5
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims))
    end = pos + 4 * count
    if end > len(buf):
        raise ValueError("truncated TSR payload")
    arr = np.frombuffer(buf[pos:end], dtype="<f4").reshape(dims).astype(DTYPE)
    return arr, end


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr


def archive_to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(tensor_to_bytes(arr))
    return b"".join(out)


def archive_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = tensor_from_bytes(buf, pos)
        tensors[name] = arr
    return tensors


def save_archive(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(archive_to_bytes(tensors))


def load_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return archive_from_bytes(fh.read())
