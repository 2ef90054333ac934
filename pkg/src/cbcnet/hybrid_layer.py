"""Hybrid convolution layer mixing cosine-synthesized and stored filters.

Of the ``M`` output filters, ``round(alpha * M)`` (ties to even) are CBC
filters and come first in the output channel order; the remaining ones are
ordinary weight filters.  For 1x1 kernels the spatial basis is forced to
``unit`` so only the channel basis is learned.
"""

from __future__ import annotations

import math

import numpy as np

from . import cbc_basis as cb
from . import tensor_core as tc
from .errors import ConfigError, ShapeError
from .layers import Layer


def cbc_filter_count(alpha: float, out_channels: int) -> int:
    # Python's round() is half-to-even
    return int(round(alpha * out_channels))


def effective_variant(variant: str | tuple[str, str], kernel_h: int, kernel_w: int) -> tuple[str, str]:
    spatial, feature = cb.parse_variant(variant) if isinstance(variant, str) else variant
    if kernel_h == 1 and kernel_w == 1:
        spatial = "unit"
    return spatial, feature


def hybrid_param_count(geom: tc.ConvGeometry, alpha: float, variant, use_bias: bool = True) -> int:
    """Static parameter count of a hybrid layer (batchnorm not included)."""
    m = geom.out_channels
    m_cbc = cbc_filter_count(alpha, m)
    per_cbc = cb.param_count(effective_variant(variant, geom.kernel_h, geom.kernel_w), geom.in_channels)
    per_std = geom.kernel_h * geom.kernel_w * geom.in_channels
    return m_cbc * per_cbc + (m - m_cbc) * per_std + (m if use_bias else 0)


class HybridConv(Layer):
    kind = "hybrid_conv"

    def __init__(self, geom: tc.ConvGeometry, alpha: float, variant, use_bias: bool = True):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        self.geom = geom
        self.alpha = float(alpha)
        self.variant_name = variant if isinstance(variant, str) else None
        self.spatial_kind, self.feature_kind = effective_variant(variant, geom.kernel_h, geom.kernel_w)
        m = geom.out_channels
        self.m_cbc = cbc_filter_count(alpha, m)
        self.m_std = m - self.m_cbc
        c = geom.in_channels
        self.spatial = np.zeros((self.m_cbc, cb.spatial_size(self.spatial_kind)))
        self.feature = np.zeros((self.m_cbc, cb.feature_size(self.feature_kind, c)))
        self.std_weights = np.zeros((self.m_std, c, geom.kernel_h, geom.kernel_w))
        self.bias = np.zeros(m) if use_bias else None
        self._cache = None

    @classmethod
    def init(cls, geom: tc.ConvGeometry, alpha: float, variant, seed, use_bias: bool = True) -> "HybridConv":
        """Random initialization, deterministic in ``seed``.

        Standard filters use a Glorot-style uniform range; spatial and channel
        frequencies start in ``[0, pi]``, phases in ``[0, 2*pi)`` and
        amplitudes in ``+-sqrt(2 / fan_in)``.
        """
        layer = cls(geom, alpha, variant, use_bias)
        rng = np.random.default_rng(seed)
        hw = geom.kernel_h * geom.kernel_w
        c, m = geom.in_channels, geom.out_channels
        std_lim = math.sqrt(6.0 / (c * hw + m * hw))
        layer.std_weights[...] = rng.uniform(-std_lim, std_lim, size=layer.std_weights.shape)
        amp_lim = math.sqrt(2.0 / (c * hw))
        f = layer.m_cbc
        if layer.spatial_kind == "product":
            freq = rng.uniform(0.0, math.pi, size=(f, 2))
            phase = rng.uniform(0.0, 2 * math.pi, size=(f, 2))
            layer.spatial[...] = np.stack([freq[:, 0], phase[:, 0], freq[:, 1], phase[:, 1]], axis=1)
        elif layer.spatial_kind == "direction":
            freq = rng.uniform(0.0, math.pi, size=(f, 2))
            phase = rng.uniform(0.0, 2 * math.pi, size=(f, 1))
            layer.spatial[...] = np.concatenate([freq, phase], axis=1)
        if layer.feature_kind == "direct":
            amp = rng.uniform(-amp_lim, amp_lim, size=f)
            wc = rng.uniform(0.0, math.pi, size=f)
            phc = rng.uniform(0.0, 2 * math.pi, size=f)
            layer.feature[...] = np.stack([amp, wc, phc], axis=1)
        else:
            layer.feature[...] = rng.uniform(-amp_lim, amp_lim, size=layer.feature.shape)
        return layer

    # -- parameters ---------------------------------------------------------

    def params(self):
        p = {"cbc_spatial": self.spatial, "cbc_feature": self.feature, "std_weights": self.std_weights}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def param_count(self) -> int:
        return hybrid_param_count(self.geom, self.alpha, (self.spatial_kind, self.feature_kind), self.bias is not None)

    @property
    def cbc_filters(self) -> list[cb.CbcFilterParams]:
        return [
            cb.CbcFilterParams(
                cb.spatial_from_values(self.spatial_kind, self.spatial[i]),
                cb.feature_from_values(self.feature_kind, self.feature[i]),
            )
            for i in range(self.m_cbc)
        ]

    def cbc_filter_grads(self) -> list[cb.CbcFilterParams]:
        gs, gf = self.grad["cbc_spatial"], self.grad["cbc_feature"]
        return [
            cb.CbcFilterParams(
                cb.spatial_from_values(self.spatial_kind, gs[i]),
                cb.feature_from_values(self.feature_kind, gf[i]),
            )
            for i in range(self.m_cbc)
        ]

    # -- compute ------------------------------------------------------------

    def materialize(self) -> np.ndarray:
        """Full (M, C, H, W) weight tensor, CBC filters first."""
        g = self.geom
        cbc = cb.synthesize_bank(
            self.spatial_kind, self.feature_kind, self.spatial, self.feature, g.kernel_h, g.kernel_w, g.in_channels
        )
        return np.concatenate([cbc, self.std_weights], axis=0)

    def forward(self, x, training=True):
        w = self.materialize()
        out = tc.conv2d_forward(x, w, self.bias, self.geom)
        self._cache = (x, w)
        return out

    def backward(self, grad_out):
        x, w = self._require("_cache")
        gw, gb = tc.conv2d_backward_weights(x, grad_out, self.geom)
        gs, gf = cb.grad_bank(self.spatial_kind, self.feature_kind, self.spatial, self.feature, gw[: self.m_cbc])
        self.grad = {"cbc_spatial": gs, "cbc_feature": gf, "std_weights": gw[self.m_cbc :]}
        if self.bias is not None:
            self.grad["bias"] = gb
        return tc.conv2d_backward_input(w, grad_out, self.geom, x.shape[2:])

    # -- serialization ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "type": self.kind,
            "variant": [self.spatial_kind, self.feature_kind],
            "alpha": self.alpha,
            "geom": self.geom.to_dict(),
            "cbc": [f.to_dict() for f in self.cbc_filters],
            "std_weights": self.std_weights.tolist(),
            "bias": None if self.bias is None else self.bias.tolist(),
        }

    @classmethod
    def from_state(cls, d: dict) -> "HybridConv":
        geom = tc.ConvGeometry(**d["geom"])
        layer = cls(geom, d["alpha"], tuple(d["variant"]), use_bias=d["bias"] is not None)
        if len(d["cbc"]) != layer.m_cbc:
            raise ShapeError(f"state has {len(d['cbc'])} CBC filters, layer expects {layer.m_cbc}")
        for i, fd in enumerate(d["cbc"]):
            p = cb.CbcFilterParams.from_dict(fd)
            layer.spatial[i] = p.spatial.values()
            layer.feature[i] = p.feature.values()
        layer.std_weights[...] = np.asarray(d["std_weights"], dtype=np.float64).reshape(layer.std_weights.shape)
        if layer.bias is not None:
            layer.bias[...] = d["bias"]
        return layer

    def load_arrays(self, d: dict):
        other = HybridConv.from_state(d)
        for name, arr in self.params().items():
            arr[...] = other.params()[name]
