"""Cosine-basis filter synthesis.

A CBC filter is the separable product ``S(x, y) * F(c)`` of a spatial basis
and a feature (channel) basis.  Spatial kinds:

* ``product``   -- ``cos(wx*x + phase_x) * cos(wy*y + phase_y)``  (4 params)
* ``direction`` -- ``cos(wx*x + wy*y + phase)``                    (3 params)
* ``unit``      -- constant 1, used for 1x1 kernels                (0 params)

Feature kinds:

* ``direct`` -- ``amp * cos(wc*c + phase_c)``  (3 params)
* ``weight`` -- ``amps[c]``                     (C params)

Spatial coordinates are centred on the kernel (``x = ix - (W-1)/2``), so a
larger kernel samples a superset of the same continuous surface.  The channel
coordinate is the raw 0-based index.

Besides the per-filter API (:class:`CbcFilterParams`, :func:`synthesize_weights`,
:func:`grad_params`) there is a batched form operating on stacked parameter
arrays, which is what :class:`cbcnet.hybrid_layer.HybridConv` uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError

SPATIAL_KINDS = ("product", "direction", "unit")
FEATURE_KINDS = ("direct", "weight")

# short variant names used by configs and the CLI
VARIANTS = {
    "spfd": ("product", "direct"),
    "spfw": ("product", "weight"),
    "sdfd": ("direction", "direct"),
    "sdfw": ("direction", "weight"),
}


def parse_variant(name: str) -> tuple[str, str]:
    try:
        return VARIANTS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


def spatial_size(kind: str) -> int:
    return {"product": 4, "direction": 3, "unit": 0}[kind]


def feature_size(kind: str, channels: int) -> int:
    return 3 if kind == "direct" else channels


# ---------------------------------------------------------------------------
# per-filter parameter records


@dataclass
class SpatialProduct:
    wx: float
    phase_x: float
    wy: float
    phase_y: float
    kind = "product"

    def values(self) -> np.ndarray:
        return np.array([self.wx, self.phase_x, self.wy, self.phase_y], dtype=np.float64)


@dataclass
class SpatialDirection:
    wx: float
    wy: float
    phase: float
    kind = "direction"

    def values(self) -> np.ndarray:
        return np.array([self.wx, self.wy, self.phase], dtype=np.float64)


@dataclass
class SpatialUnit:
    kind = "unit"

    def values(self) -> np.ndarray:
        return np.zeros(0)


@dataclass
class FeatureDirect:
    amp: float
    wc: float
    phase_c: float
    kind = "direct"

    def values(self) -> np.ndarray:
        return np.array([self.amp, self.wc, self.phase_c], dtype=np.float64)


@dataclass
class FeatureWeight:
    amps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kind = "weight"

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=np.float64).reshape(-1)

    def values(self) -> np.ndarray:
        return self.amps.copy()


SpatialBasis = SpatialProduct | SpatialDirection | SpatialUnit
FeatureBasis = FeatureDirect | FeatureWeight


def spatial_from_values(kind: str, v) -> SpatialBasis:
    v = [float(t) for t in np.asarray(v, dtype=np.float64).reshape(-1)]
    if len(v) != spatial_size(kind):
        raise ShapeError(f"{kind} spatial basis needs {spatial_size(kind)} values, got {len(v)}")
    if kind == "product":
        return SpatialProduct(*v)
    if kind == "direction":
        return SpatialDirection(*v)
    return SpatialUnit()


def feature_from_values(kind: str, v) -> FeatureBasis:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if kind == "direct":
        if v.size != 3:
            raise ShapeError(f"direct feature basis needs 3 values, got {v.size}")
        return FeatureDirect(*(float(t) for t in v))
    return FeatureWeight(v.copy())


@dataclass
class CbcFilterParams:
    spatial: SpatialBasis
    feature: FeatureBasis

    @property
    def variant(self) -> tuple[str, str]:
        return (self.spatial.kind, self.feature.kind)

    def to_dict(self) -> dict:
        return {
            "spatial": self.spatial.kind,
            "feature": self.feature.kind,
            "spatial_values": self.spatial.values().tolist(),
            "feature_values": self.feature.values().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CbcFilterParams":
        return cls(
            spatial_from_values(d["spatial"], d.get("spatial_values", [])),
            feature_from_values(d["feature"], d["feature_values"]),
        )


# ---------------------------------------------------------------------------
# pointwise evaluation


def spatial_eval(s: SpatialBasis, x: float, y: float) -> float:
    if isinstance(s, SpatialProduct):
        return float(np.cos(s.wx * x + s.phase_x) * np.cos(s.wy * y + s.phase_y))
    if isinstance(s, SpatialDirection):
        return float(np.cos(s.wx * x + s.wy * y + s.phase))
    return 1.0


def feature_eval(f: FeatureBasis, c: int) -> float:
    if isinstance(f, FeatureDirect):
        return float(f.amp * np.cos(f.wc * c + f.phase_c))
    if not 0 <= c < f.amps.size:
        raise IndexError(f"channel {c} out of range for {f.amps.size} amplitudes")
    return float(f.amps[c])


@lru_cache(maxsize=64)
def centered_coords(n: int) -> np.ndarray:
    """Sampling positions ``-(n-1)/2 .. (n-1)/2`` in unit steps (mean exactly 0).

    The returned array is cached and read-only.
    """
    xs = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    xs.flags.writeable = False
    return xs


@lru_cache(maxsize=64)
def channel_coords(c: int) -> np.ndarray:
    cs = np.arange(c, dtype=np.float64)
    cs.flags.writeable = False
    return cs


def coordinate_grid(h: int, w: int, c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(xs, ys, cs)``: centred column/row positions and 0-based channel indices."""
    return centered_coords(w), centered_coords(h), channel_coords(c)


# ---------------------------------------------------------------------------
# batched synthesis over F filters sharing one variant
#
# spatial: (F, spatial_size) array, feature: (F, feature_size) array


def _spatial_bank(kind: str, sp: np.ndarray, h: int, w: int):
    """Spatial surfaces (F, H, W) plus the pieces needed for the gradient."""
    xs, ys = centered_coords(w), centered_coords(h)
    f = sp.shape[0]
    if kind == "product":
        ax = sp[:, 0:1] * xs[None, :] + sp[:, 1:2]  # (F, W)
        ay = sp[:, 2:3] * ys[None, :] + sp[:, 3:4]  # (F, H)
        cx, cy = np.cos(ax), np.cos(ay)
        return cy[:, :, None] * cx[:, None, :], (xs, ys, ax, ay, cx, cy)
    if kind == "direction":
        arg = sp[:, 0, None, None] * xs[None, None, :] + sp[:, 1, None, None] * ys[None, :, None] + sp[:, 2, None, None]
        return np.cos(arg), (xs, ys, arg)
    return np.ones((f, h, w)), None


def _feature_bank(kind: str, fp: np.ndarray, c: int):
    cs = channel_coords(c)
    if kind == "direct":
        arg = fp[:, 1:2] * cs[None, :] + fp[:, 2:3]  # (F, C)
        return fp[:, 0:1] * np.cos(arg), (cs, arg)
    return fp, None


def _check_bank(spatial_kind, feature_kind, sp, fp, c):
    if spatial_kind not in SPATIAL_KINDS or feature_kind not in FEATURE_KINDS:
        raise ConfigError(f"unknown basis pair ({spatial_kind}, {feature_kind})")
    sp = np.asarray(sp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    f = fp.shape[0]
    if sp.shape != (f, spatial_size(spatial_kind)):
        raise ShapeError(f"spatial params shape {sp.shape} != {(f, spatial_size(spatial_kind))}")
    if fp.shape != (f, feature_size(feature_kind, c)):
        raise ShapeError(f"feature params shape {fp.shape} != {(f, feature_size(feature_kind, c))}")
    return sp, fp


def synthesize_bank(spatial_kind: str, feature_kind: str, sp, fp, h: int, w: int, c: int) -> np.ndarray:
    """Weights of shape (F, C, H, W) for F filters of one variant."""
    if min(h, w, c) < 1:
        raise ShapeError(f"kernel dims must be positive, got {(c, h, w)}")
    sp, fp = _check_bank(spatial_kind, feature_kind, sp, fp, c)
    s, _ = _spatial_bank(spatial_kind, sp, h, w)
    feat, _ = _feature_bank(feature_kind, fp, c)
    return feat[:, :, None, None] * s[:, None, :, :]


def grad_bank(spatial_kind: str, feature_kind: str, sp, fp, grad_w) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule from dL/dW (F, C, H, W) to the stacked basis parameters.

    Returns ``(grad_spatial, grad_feature)`` shaped like ``sp`` and ``fp``.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    if grad_w.ndim != 4:
        raise ShapeError(f"grad_weights must be (F, C, H, W), got {grad_w.shape}")
    f, c, h, w = grad_w.shape
    sp, fp = _check_bank(spatial_kind, feature_kind, sp, fp, c)
    s, s_aux = _spatial_bank(spatial_kind, sp, h, w)
    feat, f_aux = _feature_bank(feature_kind, fp, c)

    # dL/dS[f,y,x] = sum_c G[f,c,y,x] F[f,c];  dL/dF[f,c] = sum_{y,x} G[f,c,y,x] S[f,y,x]
    g_s = np.einsum("fcyx,fc->fyx", grad_w, feat)
    g_f = np.einsum("fcyx,fyx->fc", grad_w, s)

    if spatial_kind == "product":
        xs, ys, ax, ay, cx, cy = s_aux
        # S = cy[y] * cx[x]
        gx_part = np.einsum("fyx,fy->fx", g_s, cy)  # dL/dcx
        gy_part = np.einsum("fyx,fx->fy", g_s, cx)  # dL/dcy
        sx, sy = -np.sin(ax), -np.sin(ay)
        grad_sp = np.stack(
            [
                (gx_part * sx * xs[None, :]).sum(axis=1),
                (gx_part * sx).sum(axis=1),
                (gy_part * sy * ys[None, :]).sum(axis=1),
                (gy_part * sy).sum(axis=1),
            ],
            axis=1,
        )
    elif spatial_kind == "direction":
        xs, ys, arg = s_aux
        d = -np.sin(arg) * g_s  # dL/d(arg)
        grad_sp = np.stack(
            [
                (d * xs[None, None, :]).sum(axis=(1, 2)),
                (d * ys[None, :, None]).sum(axis=(1, 2)),
                d.sum(axis=(1, 2)),
            ],
            axis=1,
        )
    else:
        grad_sp = np.zeros((f, 0))

    if feature_kind == "direct":
        cs, arg = f_aux
        amp = fp[:, 0:1]
        sin = np.sin(arg)
        grad_fp = np.stack(
            [
                (g_f * np.cos(arg)).sum(axis=1),
                (g_f * -amp * sin * cs[None, :]).sum(axis=1),
                (g_f * -amp * sin).sum(axis=1),
            ],
            axis=1,
        )
    else:
        grad_fp = g_f
    return grad_sp, grad_fp


# ---------------------------------------------------------------------------
# per-filter front ends


def synthesize_weights(p: CbcFilterParams, h: int, w: int, c: int) -> np.ndarray:
    """``weight[c, iy, ix] = S(xs[ix], ys[iy]) * F(c)`` as a (C, H, W) array."""
    fv = p.feature.values()
    if p.feature.kind == "weight" and fv.size != c:
        raise ShapeError(f"feature-weight basis has {fv.size} amplitudes, layer has {c} channels")
    return synthesize_bank(p.spatial.kind, p.feature.kind, p.spatial.values()[None], fv[None], h, w, c)[0]


def grad_params(p: CbcFilterParams, grad_weights) -> CbcFilterParams:
    """Gradient record with the same layout as ``p``."""
    grad_weights = np.asarray(grad_weights, dtype=np.float64)
    if grad_weights.ndim != 3:
        raise ShapeError(f"grad_weights must be (C, H, W), got {grad_weights.shape}")
    gs, gf = grad_bank(
        p.spatial.kind, p.feature.kind, p.spatial.values()[None], p.feature.values()[None], grad_weights[None]
    )
    return CbcFilterParams(spatial_from_values(p.spatial.kind, gs[0]), feature_from_values(p.feature.kind, gf[0]))


def param_count(p: CbcFilterParams | tuple[str, str], channels: int) -> int:
    """Learnable scalars of one CBC filter, layer bias excluded."""
    spatial_kind, feature_kind = p.variant if isinstance(p, CbcFilterParams) else p
    return spatial_size(spatial_kind) + feature_size(feature_kind, channels)
