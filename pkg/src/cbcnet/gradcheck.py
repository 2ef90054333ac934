"""Central finite-difference checks of every analytic gradient.

The numerical side only ever calls forward functions, so it stays independent
of the backward code it verifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import cbc_basis as cb
from . import tensor_core as tc
from .hybrid_layer import HybridConv
from .layers import Conv2d

STEP = 1e-5
TOLERANCE = 1e-5
# below this magnitude a gradient entry is compared in absolute terms
REL_FLOOR = 1e-8
# Central differences carry round-off of roughly eps*|loss|/STEP, so entries
# many orders below the largest gradient of the same tensor cannot be resolved
# in relative terms.  Their denominator is floored at SCALE_FLOOR * max|grad|.
SCALE_FLOOR = 1e-4

VARIANT_NAMES = tuple(cb.VARIANTS)
ALPHAS = (0.0, 0.5, 1.0)
KERNELS = (1, 3, 5)


def numerical_grad(loss_fn, arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """d loss_fn() / d arr by central differences, perturbing ``arr`` in place.

    ``loss_fn`` may return a scalar or an array of terms whose sum is the
    loss.  Terms are differenced one by one before an exact summation, which
    keeps the cancellation error far below that of differencing two sums.
    """
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = np.asarray(loss_fn(), dtype=np.float64)
        flat[i] = orig - step
        down = np.asarray(loss_fn(), dtype=np.float64)
        flat[i] = orig
        gflat[i] = math.fsum((up - down).ravel()) / (2 * step)
    return grad


def rel_error(analytic, numeric, floor: float = REL_FLOOR, scale_floor: float = SCALE_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor, scale_floor * max|n|)`` elementwise."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = scale_floor * float(np.abs(numeric).max()) if numeric.size else 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor, scale))
    return np.abs(analytic - numeric) / denom


def max_rel_error(analytic, numeric, floor: float = REL_FLOOR, scale_floor: float = SCALE_FLOOR) -> float:
    err = rel_error(analytic, numeric, floor, scale_floor)
    return float(err.max()) if err.size else 0.0


def _compare(pairs) -> tuple[float, float, int]:
    """Worst scale-aware and strict errors over ``(analytic, numeric)`` tensor pairs."""
    worst = strict = 0.0
    n = 0
    for a, num in pairs:
        worst = max(worst, max_rel_error(a, num))
        strict = max(strict, max_rel_error(a, num, scale_floor=0.0))
        n += np.size(a)
    return worst, strict, n


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_scalars: int
    tolerance: float = TOLERANCE
    strict_rel_error: float | None = None  # same comparison without the scale floor

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_rel_err={self.max_rel_error:.3e} over {self.n_scalars} scalars"


def _result(name, pairs) -> CheckResult:
    worst, strict, n = _compare(pairs)
    return CheckResult(name, worst, n, strict_rel_error=strict)


# ---------------------------------------------------------------------------
# individual suites


def check_basis(variant: str, kernel: int, seed: int, channels: int = 4) -> CheckResult:
    """grad_params against differences of ``sum(G * synthesize_weights(p))``."""
    rng = np.random.default_rng(seed)
    spatial_kind, feature_kind = cb.parse_variant(variant)
    if kernel == 1:
        spatial_kind = "unit"
    sp = rng.uniform(-np.pi, np.pi, size=(1, cb.spatial_size(spatial_kind)))
    fp = rng.uniform(-1.5, 1.5, size=(1, cb.feature_size(feature_kind, channels)))
    upstream = rng.normal(size=(channels, kernel, kernel))
    p = cb.CbcFilterParams(cb.spatial_from_values(spatial_kind, sp[0]), cb.feature_from_values(feature_kind, fp[0]))
    g = cb.grad_params(p, upstream)

    def loss():
        q = cb.CbcFilterParams(cb.spatial_from_values(spatial_kind, sp[0]), cb.feature_from_values(feature_kind, fp[0]))
        return upstream * cb.synthesize_weights(q, kernel, kernel, channels)

    pairs = [(g.spatial.values(), numerical_grad(loss, sp)[0]), (g.feature.values(), numerical_grad(loss, fp)[0])]
    return _result(f"basis {variant} k={kernel} seed={seed}", pairs)


def check_hybrid_layer(variant: str, alpha: float, kernel: int, seed: int,
                       in_channels: int = 2, out_channels: int = 2) -> CheckResult:
    """Every learnable scalar of a random hybrid layer, plus the input gradient."""
    rng = np.random.default_rng(seed)
    pad = kernel // 2
    geom = tc.ConvGeometry(kernel, kernel, in_channels, out_channels, stride=1 + seed % 2, padding=pad)
    layer = HybridConv.init(geom, alpha, variant, seed)
    layer.bias[...] = rng.normal(size=out_channels)
    x = rng.normal(size=(1, in_channels, kernel + 1, kernel + 2))
    out_shape = layer.forward(x).shape
    r = rng.normal(size=out_shape)

    def loss():
        out = layer.forward(x)
        return r * out + 0.5 * out * out

    out = layer.forward(x)
    gx = layer.backward(r + out)
    pairs = [(gx, numerical_grad(loss, x))]
    pairs += [(layer.grad[name], numerical_grad(loss, arr)) for name, arr in layer.params().items()]
    return _result(f"hybrid {variant} alpha={alpha:g} k={kernel} seed={seed}", pairs)


def check_conv(seed: int) -> CheckResult:
    """Plain convolution with loss ``sum(out**2)``; weights, bias and input."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    geom = tc.ConvGeometry(k, k, int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                           stride=int(rng.integers(1, 3)), padding=int(rng.integers(0, k)))
    layer = Conv2d(geom, rng.normal(size=geom.weight_shape), rng.normal(size=geom.out_channels))
    x = rng.normal(size=(int(rng.integers(1, 4)), geom.in_channels, int(rng.integers(k, 9)), int(rng.integers(k, 9))))

    def loss():
        return layer.forward(x) ** 2

    out = layer.forward(x)
    gx = layer.backward(2 * out)
    pairs = [(gx, numerical_grad(loss, x)), (layer.grad["weights"], numerical_grad(loss, layer.weights)),
             (layer.grad["bias"], numerical_grad(loss, layer.bias))]
    return _result(f"conv2d seed={seed}", pairs)


def check_kernels(seed: int) -> list[CheckResult]:
    """relu, maxpool, global pooling, batchnorm, dense and softmax cross-entropy."""
    rng = np.random.default_rng(seed)
    n, c, h, w = 3, 2, 4, 6
    results = []

    x = rng.normal(size=(n, c, h, w))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the relu kink
    r = rng.normal(size=x.shape)
    a = tc.relu_backward(x, r)
    num = numerical_grad(lambda: float((r * tc.relu_forward(x)).sum()), x)
    results.append(_result(f"relu seed={seed}", [(a, num)]))

    x = rng.permutation(np.arange(n * c * h * w, dtype=np.float64)).reshape(n, c, h, w) * 0.1
    out, idx = tc.maxpool2x2_forward(x)
    r = rng.normal(size=out.shape)
    a = tc.maxpool2x2_backward(r, idx, x.shape)
    num = numerical_grad(lambda: float((r * tc.maxpool2x2_forward(x)[0]).sum()), x)
    results.append(_result(f"maxpool seed={seed}", [(a, num)]))

    x = rng.normal(size=(n, c, h, w))
    r = rng.normal(size=(n, c))
    a = tc.global_avg_pool_backward(r, x.shape)
    num = numerical_grad(lambda: float((r * tc.global_avg_pool_forward(x)).sum()), x)
    results.append(_result(f"global_avg_pool seed={seed}", [(a, num)]))

    x = rng.normal(size=(n, c, h, w)) * 2 + 1
    gamma, beta = rng.normal(size=c), rng.normal(size=c)
    r = rng.normal(size=x.shape)

    def bn_loss():
        out, _ = tc.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c), training=True)
        return r * out + 0.5 * out**2

    out, cache = tc.batchnorm_forward(x, gamma, beta, np.zeros(c), np.ones(c), training=True)
    gx, gg, gb = tc.batchnorm_backward(r + out, cache)
    pairs = [(gx, numerical_grad(bn_loss, x)), (gg, numerical_grad(bn_loss, gamma)), (gb, numerical_grad(bn_loss, beta))]
    results.append(_result(f"batchnorm seed={seed}", pairs))

    x = rng.normal(size=(n, c, 2, 2))
    wts, b = rng.normal(size=(5, c * 4)), rng.normal(size=5)
    r = rng.normal(size=(n, 5))

    def dense_loss():
        return float((r * tc.dense_forward(x, wts, b)).sum())

    gx, gw, gb = tc.dense_backward(x, wts, r)
    pairs = [(gx, numerical_grad(dense_loss, x)), (gw, numerical_grad(dense_loss, wts)),
             (gb, numerical_grad(dense_loss, b))]
    results.append(_result(f"dense seed={seed}", pairs))

    logits = rng.normal(size=(n, 5)) * 3
    labels = rng.integers(0, 5, size=n)
    _, a = tc.softmax_cross_entropy(logits, labels)
    num = numerical_grad(lambda: tc.softmax_cross_entropy(logits, labels)[0], logits)
    results.append(_result(f"softmax_ce seed={seed}", [(a, num)]))
    return results


def check_model(model, x, labels) -> CheckResult:
    """End-to-end check of a built model in training mode."""
    from .tensor_core import softmax_cross_entropy

    def loss():
        return softmax_cross_entropy(model.forward(x, training=True), labels)[0]

    _, g = softmax_cross_entropy(model.forward(x, training=True), labels)
    model.backward(g)
    pairs = [(model.grad[name], numerical_grad(loss, arr)) for name, arr in model.params().items()]
    return _result(f"model {model.config.get('name', '')}", pairs)


# ---------------------------------------------------------------------------
# suites


def layer_grid(variants=VARIANT_NAMES, alphas=ALPHAS, kernels=KERNELS):
    return list(product(variants, alphas, kernels))


def run_all(variants=VARIANT_NAMES, seeds: int = 100, log=None) -> list[CheckResult]:
    """Basis and hybrid-layer checks over the full grid plus the plain kernels."""
    results = []
    for variant, alpha, kernel in layer_grid(variants):
        for seed in range(seeds):
            results.append(check_hybrid_layer(variant, alpha, kernel, seed))
    for variant in variants:
        for kernel in KERNELS:
            for seed in range(seeds):
                results.append(check_basis(variant, kernel, seed))
    for seed in range(min(seeds, 20)):
        results.append(check_conv(seed))
        results.extend(check_kernels(seed))
    if log is not None:
        for r in results:
            if not r.passed:
                log(r.line())
    return results
