"""Central finite-difference verification of analytic gradients.

Checks run in a 64-bit shadow mode: the layer under test is cloned with
float64 parameters so roundoff does not mask (or fake) gradient bugs.
The scalar probe loss is sum(R * output) for a fixed random weighting R,
so every output entry influences the check.
"""

from __future__ import annotations

import time

import numpy as np

from . import engine
from .engine import (
    AvgPool2x2,
    Conv2D,
    FullyConnected,
    ReLU,
    he_normal,
    softmax_cross_entropy,
)
from .rng import make_rng

REL_ERR_FLOOR = 1e-8


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERR_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check(layer, x: np.ndarray, eps: float = 1e-3, seed: int = 0) -> float:
    """Max relative error over all input and parameter entries.

    The layer is cloned to float64; central differences perturb every
    entry of the input and of every parameter tensor.
    """
    layer64 = layer.astype(np.float64)
    x64 = x.astype(np.float64)
    out = layer64.forward(x64)
    weighting = make_rng(seed, "gradcheck-weighting").standard_normal(out.shape)

    grad_in = layer64.backward(weighting.copy())
    analytic = {"__input__": grad_in}
    analytic.update(layer64.grads if hasattr(layer64, "grads") else {})

    def loss_at() -> float:
        return float((layer64.forward(x64) * weighting).sum())

    worst = 0.0
    tensors = {"__input__": x64}
    tensors.update(layer64.params())
    for name, tensor in tensors.items():
        if name not in analytic:
            continue
        numeric = np.empty_like(tensor)
        flat = tensor.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss_at()
            flat[i] = orig - eps
            minus = loss_at()
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2 * eps)
        worst = max(worst, _rel_err(analytic[name], numeric))
    return worst


def grad_check_softmax(logits: np.ndarray, labels, eps: float = 1e-5) -> float:
    """Finite-difference check of the softmax cross-entropy gradient."""
    logits64 = logits.astype(np.float64)
    _, analytic = softmax_cross_entropy(logits64, labels)
    numeric = np.empty_like(logits64)
    flat = logits64.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus, _ = softmax_cross_entropy(logits64, labels)
        flat[i] = orig - eps
        minus, _ = softmax_cross_entropy(logits64, labels)
        flat[i] = orig
        num_flat[i] = (plus - minus) / (2 * eps)
    return _rel_err(analytic, numeric)


CONV_KERNELS = (2, 3, 4, 6, 10, 11)


def _conv_case(kernel: int, seed: int, padding: str) -> tuple[Conv2D, np.ndarray]:
    rng = make_rng(seed, "gradcheck-conv", kernel, padding)
    c_in, c_out = 2, 3
    side = kernel + 2
    x = rng.standard_normal((1, c_in, side, side)).astype(np.float32)
    w = he_normal(rng, (c_out, c_in, kernel, kernel), fan_in=c_in * kernel * kernel)
    b = rng.standard_normal(c_out).astype(np.float32)
    return Conv2D(w, b, padding), x


def _relu_case(seed: int, eps: float) -> tuple[ReLU, np.ndarray]:
    rng = make_rng(seed, "gradcheck-relu")
    x = rng.standard_normal((4, 7)).astype(np.float32)
    # Keep every entry off the kink by more than 10*eps so central
    # differences never straddle zero.
    margin = 10 * eps
    x = np.sign(x) * (np.abs(x) + margin)
    x[x == 0] = margin * 2
    return ReLU(), x


def run_full_gradcheck(seeds: int = 20, eps: float = 1e-3) -> dict[str, float]:
    """Max relative error per layer kind over `seeds` random cases.

    Keys: conv (one entry per kernel size and padding), conv-fft (the FFT
    evaluation path, forced), avgpool, relu, fully-connected, softmax-xent.
    """
    results: dict[str, float] = {}

    def record(key: str, value: float) -> None:
        results[key] = max(results.get(key, 0.0), value)

    for seed in range(seeds):
        for kernel in CONV_KERNELS:
            for padding in ("same", "valid"):
                layer, x = _conv_case(kernel, seed, padding)
                record("conv", grad_check(layer, x, eps=eps, seed=seed))
        # FFT path on one representative kernel per seed (forced).
        old = engine.FORCE_CONV_PATH
        engine.FORCE_CONV_PATH = "fft"
        try:
            kernel = CONV_KERNELS[seed % len(CONV_KERNELS)]
            layer, x = _conv_case(kernel, seed + 1000, "same")
            record("conv-fft", grad_check(layer, x, eps=eps, seed=seed))
        finally:
            engine.FORCE_CONV_PATH = old

        rng = make_rng(seed, "gradcheck-pool")
        x = rng.standard_normal((2, 2, 4, 6)).astype(np.float32)
        record("avgpool", grad_check(AvgPool2x2(), x, eps=eps, seed=seed))

        layer, x = _relu_case(seed, eps)
        record("relu", grad_check(layer, x, eps=eps, seed=seed))

        rng = make_rng(seed, "gradcheck-fc")
        x = rng.standard_normal((4, 3)).astype(np.float32)
        w = he_normal(rng, (3, 5), fan_in=3)
        b = rng.standard_normal(5).astype(np.float32)
        record("fully-connected", grad_check(FullyConnected(w, b), x, eps=eps, seed=seed))

        rng = make_rng(seed, "gradcheck-softmax")
        logits = rng.standard_normal((5, 2)).astype(np.float32) * 3
        labels = rng.integers(0, 2, size=5)
        record("softmax-xent", grad_check_softmax(logits, labels))

    return results


def run_full_gradcheck_timed(seeds: int = 20, eps: float = 1e-3):
    start = time.perf_counter()
    results = run_full_gradcheck(seeds=seeds, eps=eps)
    return results, time.perf_counter() - start
