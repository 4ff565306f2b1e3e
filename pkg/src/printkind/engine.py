"""Minimal differentiable layer engine.

Dense float32 tensors (numpy arrays, NCHW for activations, KCkk for conv
weights) flow through functional forward/backward pairs; thin layer
classes add parameter and cache bookkeeping on top. Training arithmetic
is 32-bit; gradient checking clones layers into a 64-bit shadow mode.

Convolution is cross-correlation (no kernel flip) with stride fixed at 1.
Two internal evaluation paths produce identical results up to roundoff:
a shift-and-GEMM path, and an FFT path used for large kernels on large
feature maps (the 11x11 and 10x10 layers would otherwise dominate
training time). Both paths are exercised against the same oracles.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as _fft

from .errors import DataError, NumericsError

Array = np.ndarray

# FFT wins once the kernel is big and there is enough output area to amortize
# the transforms; measured crossover on a single core is near these values.
_FFT_MIN_KERNEL = 5
_FFT_MIN_AREA = 256
# im2col materializes [N*H'*W', C*k*k] columns; cap that at 8M elements
# (32 MB float32) so small problems take one GEMM instead of a k*k loop.
_IM2COL_LIMIT = 8 * 2**20

# Test hook: force "direct", "im2col" or "fft" regardless of the heuristic.
FORCE_CONV_PATH: str | None = None


def same_padding(kernel: int) -> tuple[int, int]:
    """(pad_before, pad_after) that preserve spatial size at stride 1.

    Asymmetric for even kernels: floor((k-1)/2) before, ceil((k-1)/2) after.
    """
    before = (kernel - 1) // 2
    return before, kernel - 1 - before


def _check_finite(name: str, arr: Array) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericsError(f"{name} contains {bad} non-finite values")


def _conv_geometry(x: Array, w: Array, b: Array, padding: str):
    if x.ndim != 4:
        raise DataError(f"conv input must be 4-D (N,C,H,W), got shape {x.shape}")
    if w.ndim != 4:
        raise DataError(f"conv weights must be 4-D (K,C,kh,kw), got shape {w.shape}")
    n, c, h, wdt = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise DataError(f"channel mismatch: input has {c}, weights expect {cw}")
    if kh != kw:
        raise DataError(f"only square kernels are supported, got {kh}x{kw}")
    if b.shape != (k,):
        raise DataError(f"bias must have shape ({k},), got {b.shape}")
    if padding == "same":
        pt, pb = same_padding(kh)
        pl, pr = same_padding(kw)
        out_h, out_w = h, wdt
    elif padding == "valid":
        pt = pb = pl = pr = 0
        out_h, out_w = h - kh + 1, wdt - kw + 1
        if out_h < 1 or out_w < 1:
            raise DataError(
                f"kernel {kh}x{kw} larger than padded input {h}x{wdt}"
            )
    else:
        raise DataError(f"unknown padding mode {padding!r}")
    return (n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w)


def _select_path(n: int, c: int, kernel: int, out_h: int, out_w: int) -> str:
    if FORCE_CONV_PATH is not None:
        return FORCE_CONV_PATH
    if kernel >= _FFT_MIN_KERNEL and out_h * out_w >= _FFT_MIN_AREA:
        return "fft"
    if out_h * out_w * c * kernel * kernel <= _IM2COL_LIMIT:
        return "im2col"  # chunked over the batch; needs one sample per chunk
    return "direct"


def conv2d_forward(x: Array, w: Array, b: Array, padding: str = "same"):
    """Cross-correlate x [N,C,H,W] with w [K,C,kh,kw], add per-channel bias.

    Returns (output [N,K,H',W'], cache for conv2d_backward). `same` padding
    preserves H,W (zero fill, asymmetric for even kernels); `valid` shrinks
    to H-kh+1.
    """
    geo = _conv_geometry(x, w, b, padding)
    n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w = geo
    path = _select_path(n, c, kh, out_h, out_w)
    if path == "fft":
        return _conv_forward_fft(x, w, b, geo)
    if path == "im2col":
        return _conv_forward_im2col(x, w, b, geo)
    return _conv_forward_direct(x, w, b, geo)


def conv2d_backward(grad_out: Array, cache):
    """Gradients of a sum-weighted scalar loss w.r.t. input, weights, bias."""
    if grad_out.shape != cache["out_shape"]:
        raise DataError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{cache['out_shape']}"
        )
    if cache["path"] == "fft":
        return _conv_backward_fft(grad_out, cache)
    if cache["path"] == "im2col":
        return _conv_backward_im2col(grad_out, cache)
    return _conv_backward_direct(grad_out, cache)


def _pad_input(x: Array, pt, pb, pl, pr) -> Array:
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _conv_forward_direct(x, w, b, geo):
    n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w = geo
    xp = _pad_input(x, pt, pb, pl, pr)
    # Channels-last so each (di,dj) shift is a clean [N*H'*W', C] GEMM operand.
    xp_cl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    w_cl = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # [kh,kw,C,K]
    acc = np.zeros((n * out_h * out_w, k), dtype=x.dtype)
    buf = np.empty((n, out_h, out_w, c), dtype=x.dtype)
    tmp = np.empty_like(acc)
    for di in range(kh):
        for dj in range(kw):
            np.copyto(buf, xp_cl[:, di : di + out_h, dj : dj + out_w, :])
            np.dot(buf.reshape(-1, c), w_cl[di, dj], out=tmp)
            acc += tmp
    out = acc.reshape(n, out_h, out_w, k).transpose(0, 3, 1, 2) + b.reshape(1, k, 1, 1)
    cache = {
        "path": "direct",
        "xp_cl": xp_cl,
        "w_cl": w_cl,
        "geo": geo,
        "out_shape": out.shape,
        "dtype": x.dtype,
    }
    return out, cache


def _conv_backward_direct(grad_out, cache):
    n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w = cache["geo"]
    xp_cl = cache["xp_cl"]
    w_cl = cache["w_cl"]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    g_cl = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, k)
    buf = np.empty((n, out_h, out_w, c), dtype=grad_out.dtype)
    gw_cl = np.empty((kh, kw, c, k), dtype=grad_out.dtype)
    gxp_cl = np.zeros(xp_cl.shape, dtype=grad_out.dtype)
    tmp = np.empty((n * out_h * out_w, c), dtype=grad_out.dtype)
    for di in range(kh):
        for dj in range(kw):
            np.copyto(buf, xp_cl[:, di : di + out_h, dj : dj + out_w, :])
            np.dot(buf.reshape(-1, c).T, g_cl, out=gw_cl[di, dj])
            np.dot(g_cl, w_cl[di, dj].T, out=tmp)
            gxp_cl[:, di : di + out_h, dj : dj + out_w, :] += tmp.reshape(
                n, out_h, out_w, c
            )
    grad_weights = np.ascontiguousarray(gw_cl.transpose(3, 2, 0, 1))
    grad_input = np.ascontiguousarray(
        gxp_cl[:, pt : pt + h, pl : pl + wdt, :].transpose(0, 3, 1, 2)
    )
    return grad_input, grad_weights, grad_bias


def _batch_chunks(n: int, per_sample: int) -> int:
    return max(1, min(n, _IM2COL_LIMIT // max(per_sample, 1)))


def _im2col(xp_chunk, kh, kw, out_h, out_w, channels):
    win = np.lib.stride_tricks.sliding_window_view(xp_chunk, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        -1, channels * kh * kw
    )


def _conv_forward_im2col(x, w, b, geo):
    n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w = geo
    xp = _pad_input(x, pt, pb, pl, pr)
    wmat = np.ascontiguousarray(w.reshape(k, c * kh * kw).T)
    out = np.empty((n, k, out_h, out_w), dtype=x.dtype)
    chunk = _batch_chunks(n, out_h * out_w * c * kh * kw)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        cols = _im2col(xp[s:e], kh, kw, out_h, out_w, c)
        y = cols @ wmat
        out[s:e] = y.reshape(e - s, out_h, out_w, k).transpose(0, 3, 1, 2)
    out += b.reshape(1, k, 1, 1)
    cache = {
        "path": "im2col",
        "xp": xp,
        "w": w,
        "geo": geo,
        "out_shape": out.shape,
        "dtype": x.dtype,
    }
    return out, cache


def _conv_backward_im2col(grad_out, cache):
    n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w = cache["geo"]
    xp = cache["xp"]
    w = cache["w"]
    hp, wp = h + pt + pb, wdt + pl + pr
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    gw_mat = np.zeros((c * kh * kw, k), dtype=grad_out.dtype)
    chunk = _batch_chunks(n, out_h * out_w * c * kh * kw)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        cols = _im2col(xp[s:e], kh, kw, out_h, out_w, c)
        g_cl = np.ascontiguousarray(
            grad_out[s:e].transpose(0, 2, 3, 1)
        ).reshape(-1, k)
        gw_mat += cols.T @ g_cl
    grad_weights = np.ascontiguousarray(gw_mat.T).reshape(k, c, kh, kw)

    # grad of the padded input = full correlation of grad_out with the
    # flipped kernel; realized as a second im2col over grad_out padded by k-1.
    wflip = np.ascontiguousarray(
        w[:, :, ::-1, ::-1].transpose(0, 2, 3, 1)
    ).reshape(k * kh * kw, c)
    grad_input = np.empty((n, c, h, wdt), dtype=grad_out.dtype)
    gchunk = _batch_chunks(n, hp * wp * k * kh * kw)
    for s in range(0, n, gchunk):
        e = min(n, s + gchunk)
        gyp = np.pad(
            grad_out[s:e],
            ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)),
        )
        gcols = _im2col(gyp, kh, kw, hp, wp, k)
        gxp = (gcols @ wflip).reshape(e - s, hp, wp, c)
        grad_input[s:e] = gxp[:, pt : pt + h, pl : pl + wdt, :].transpose(0, 3, 1, 2)
    return grad_input, grad_weights, grad_bias


def _freq_contract(a: Array, bmat: Array) -> Array:
    """Per-frequency contraction sum_r a[p,r,f] * b[r,q,f] -> [p,q,f].

    Singleton contraction dims reduce to a broadcast multiply; otherwise a
    batched matmul over the trailing frequency axes.
    """
    r = a.shape[1]
    if r == 1:
        return a[:, 0][:, None] * bmat[0][None]
    am = np.ascontiguousarray(np.moveaxis(a, (0, 1), (-2, -1)))
    bm = np.ascontiguousarray(np.moveaxis(bmat, (0, 1), (-2, -1)))
    prod = np.matmul(am, bm)  # [..., p, q]
    return np.ascontiguousarray(np.moveaxis(prod, (-2, -1), (0, 1)))


def _conv_forward_fft(x, w, b, geo):
    n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w = geo
    xp = _pad_input(x, pt, pb, pl, pr)
    hp, wp = xp.shape[2], xp.shape[3]
    # Transform lengths only need to cover the padded input; rounding up to
    # a fast composite size is markedly cheaper than e.g. 138 = 2*3*23.
    lh, lw = _fft.next_fast_len(hp, True), _fft.next_fast_len(wp, True)
    fa = _fft.rfft2(xp, s=(lh, lw))  # [N,C,lh,fw]
    fw = _fft.rfft2(w, s=(lh, lw))  # [K,C,lh,fw]
    # Correlation: Y[n,k] = irfft(sum_c FA[n,c] . conj(FW[k,c]))
    fy = _freq_contract(fa, np.conj(fw).transpose(1, 0, 2, 3))
    y_full = _fft.irfft2(fy, s=(lh, lw))
    out = y_full[:, :, :out_h, :out_w] + b.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    cache = {
        "path": "fft",
        "fa": fa,
        "fw": fw,
        "lh": lh,
        "lw": lw,
        "geo": geo,
        "out_shape": out.shape,
        "dtype": x.dtype,
    }
    return out, cache


def _conv_backward_fft(grad_out, cache):
    n, c, h, wdt, k, kh, kw, pt, pb, pl, pr, out_h, out_w = cache["geo"]
    lh, lw = cache["lh"], cache["lw"]
    fa, fw = cache["fa"], cache["fw"]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    fg = _fft.rfft2(grad_out, s=(lh, lw))  # [N,K,lh,fw]
    # grad_w[k,c] = sum_n corr(xp[n,c], gy[n,k]) = irfft(sum_n conj(FG).FA)
    fgw = _freq_contract(np.conj(fg).transpose(1, 0, 2, 3), fa)
    gw_full = _fft.irfft2(fgw, s=(lh, lw))
    grad_weights = np.ascontiguousarray(
        gw_full[:, :, :kh, :kw], dtype=grad_out.dtype
    )
    # grad_xp[n,c] = true convolution sum_k gy[n,k] * w[k,c] = irfft(FG . FW)
    fgx = _freq_contract(fg, fw)
    gxp = _fft.irfft2(fgx, s=(lh, lw))
    grad_input = np.ascontiguousarray(
        gxp[:, :, pt : pt + h, pl : pl + wdt], dtype=grad_out.dtype
    )
    return grad_input, grad_weights, grad_bias


def avgpool2x2_forward(x: Array):
    """2x2 average pooling, stride 2. Requires even H and W."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DataError(f"avgpool2x2 needs even spatial dims, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return y, {"in_shape": x.shape}


def avgpool2x2_backward(grad_out: Array, cache):
    n, c, h, w = cache["in_shape"]
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise DataError(
            f"avgpool grad shape {grad_out.shape} does not match forward"
        )
    gx = np.empty((n, c, h, w), dtype=grad_out.dtype)
    gx.reshape(n, c, h // 2, 2, w // 2, 2)[:] = (
        grad_out[:, :, :, None, :, None] * grad_out.dtype.type(0.25)
    )
    return gx


def relu_forward(x: Array):
    y = np.maximum(x, 0)
    return y, {"mask": x > 0}


def relu_backward(grad_out: Array, cache):
    return grad_out * cache["mask"]


def fully_connected_forward(x: Array, w: Array, b: Array):
    """Affine map x.W + b for x [N,D], w [D,M], b [M]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DataError(
            f"fully_connected dimension mismatch: x {x.shape}, w {w.shape}"
        )
    if b.shape != (w.shape[1],):
        raise DataError(f"bias must have shape ({w.shape[1]},), got {b.shape}")
    return x @ w + b, {"x": x, "w": w}


def fully_connected_backward(grad_out: Array, cache):
    x, w = cache["x"], cache["w"]
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise DataError(
            f"fully_connected grad shape {grad_out.shape} does not match forward"
        )
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def softmax_cross_entropy(logits: Array, labels) -> tuple[float, Array]:
    """Mean cross-entropy over the batch plus the gradient w.r.t. logits.

    Stabilized by max subtraction; grad = (softmax - onehot) / N.
    """
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(
            f"label out of range: labels must lie in [0, {n_classes})"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


def sgd_step(params: dict, grads: dict, velocities: dict, learning_rate: float, momentum: float) -> None:
    """Heavy-ball SGD, in place: v <- momentum*v + g; p <- p - lr*v."""
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.shape}"
            )
        _check_finite(f"gradient of {name}", g)
        v = velocities.setdefault(name, np.zeros_like(p))
        v *= p.dtype.type(momentum)
        v += g
        p -= p.dtype.type(learning_rate) * v


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Array:
    """He-normal init: std = sqrt(2/fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape, dtype=np.float64) * std).astype(dtype)


class Conv2D:
    """Convolution layer: weights [K,C,k,k], per-output-channel bias [K]."""

    kind = "conv"

    def __init__(self, weights: Array, bias: Array, padding: str = "same"):
        self.weights = weights
        self.bias = bias
        self.padding = padding
        self._cache = None
        self.grads: dict[str, Array] = {}

    def params(self) -> dict[str, Array]:
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x: Array) -> Array:
        y, self._cache = conv2d_forward(x, self.weights, self.bias, self.padding)
        return y

    def backward(self, grad_out: Array) -> Array:
        if self._cache is None:
            raise DataError("backward called before forward")
        gx, gw, gb = conv2d_backward(grad_out, self._cache)
        self.grads = {"weights": gw, "bias": gb}
        return gx

    def astype(self, dtype) -> "Conv2D":
        return Conv2D(self.weights.astype(dtype), self.bias.astype(dtype), self.padding)


class AvgPool2x2:
    kind = "avgpool"

    def __init__(self):
        self._cache = None

    def params(self):
        return {}

    def forward(self, x: Array) -> Array:
        y, self._cache = avgpool2x2_forward(x)
        return y

    def backward(self, grad_out: Array) -> Array:
        if self._cache is None:
            raise DataError("backward called before forward")
        return avgpool2x2_backward(grad_out, self._cache)

    def astype(self, dtype) -> "AvgPool2x2":
        return AvgPool2x2()


class ReLU:
    kind = "relu"

    def __init__(self):
        self._cache = None

    def params(self):
        return {}

    def forward(self, x: Array) -> Array:
        y, self._cache = relu_forward(x)
        return y

    def backward(self, grad_out: Array) -> Array:
        if self._cache is None:
            raise DataError("backward called before forward")
        return relu_backward(grad_out, self._cache)

    def astype(self, dtype) -> "ReLU":
        return ReLU()


class Flatten:
    kind = "flatten"

    def __init__(self):
        self._in_shape = None

    def params(self):
        return {}

    def forward(self, x: Array) -> Array:
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: Array) -> Array:
        return grad_out.reshape(self._in_shape)

    def astype(self, dtype) -> "Flatten":
        return Flatten()


class FullyConnected:
    """Affine layer: weights [D,M], bias [M]."""

    kind = "fully-connected"

    def __init__(self, weights: Array, bias: Array):
        self.weights = weights
        self.bias = bias
        self._cache = None
        self.grads: dict[str, Array] = {}

    def params(self) -> dict[str, Array]:
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x: Array) -> Array:
        y, self._cache = fully_connected_forward(x, self.weights, self.bias)
        return y

    def backward(self, grad_out: Array) -> Array:
        if self._cache is None:
            raise DataError("backward called before forward")
        gx, gw, gb = fully_connected_backward(grad_out, self._cache)
        self.grads = {"weights": gw, "bias": gb}
        return gx

    def astype(self, dtype) -> "FullyConnected":
        return FullyConnected(self.weights.astype(dtype), self.bias.astype(dtype))
