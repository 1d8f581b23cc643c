"""Flow evaluation: average endpoint error and color-wheel rendering."""

from dataclasses import dataclass

import numpy as np


class EvalError(ValueError):
    pass


class EmptyMaskError(EvalError):
    """AEE requested over a mask with no active pixels."""


@dataclass
class FlowField:
    """Dense displacement field (u: columns, v: rows), in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape:
            raise EvalError("u and v must share a shape")

    @classmethod
    def from_array(cls, flow):
        flow = np.asarray(flow)
        return cls(flow[0], flow[1])

    def as_array(self):
        return np.stack([self.u, self.v])


@dataclass
class EvalMask:
    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool)

    @property
    def m(self):
        return int(self.active.sum())

    @classmethod
    def full(cls, shape):
        return cls(np.ones(shape, dtype=bool))


def aee(estim, gt, mask=None):
    """Mean Euclidean distance between flows over the masked pixels."""
    if estim.u.shape != gt.u.shape:
        raise EvalError("flow shapes differ: %r vs %r"
                        % (estim.u.shape, gt.u.shape))
    for f in (estim, gt):
        if not (np.isfinite(f.u).all() and np.isfinite(f.v).all()):
            raise EvalError("non-finite values in flow input")
    if mask is None:
        mask = EvalMask.full(estim.u.shape)
    if mask.m == 0:
        raise EmptyMaskError("no active pixels in evaluation mask")
    du = estim.u - gt.u
    dv = estim.v - gt.v
    dist = np.sqrt(du * du + dv * dv)
    return float(dist[mask.active].mean())


def event_mask(volume):
    """Pixels that carry at least one spike anywhere in the volume."""
    active = volume.data.any(axis=(0, 1))
    return EvalMask(active)


def center_crop(arr, size):
    """Center crop of the trailing two axes to ``size`` (h, w)."""
    h, w = size
    H, W = arr.shape[-2:]
    if h > H or w > W:
        raise EvalError("crop %r larger than array %r" % (size, arr.shape))
    y0, x0 = (H - h) // 2, (W - w) // 2
    return arr[..., y0:y0 + h, x0:x0 + w]


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_color(flow, max_mag=None):
    """Standard color-wheel rendering: hue from direction, saturation
    from magnitude; zero flow maps to white. Returns uint8 [H, W, 3]."""
    mag = np.sqrt(flow.u ** 2 + flow.v ** 2)
    if max_mag is None:
        max_mag = mag.max()
    if max_mag <= 0:
        max_mag = 1.0
    hue = (np.arctan2(flow.v, flow.u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
