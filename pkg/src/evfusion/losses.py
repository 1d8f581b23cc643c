"""Unsupervised flow losses: photometric warping term plus smoothness.

The photometric term warps the end frame backward along the predicted
flow with a bilinear sampler and penalizes the residual against the
start frame with the Charbonnier function. The smoothness term is an L1
penalty on neighboring-pixel flow differences. Multi-scale assembly
pools the images down to each prediction scale.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    smooth_weight: float = 0.0003
    r: float = 0.45
    eta: float = 1e-3
    scale_weights: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.smooth_weight < 0:
            raise LossError("smoothness weight must be nonnegative")
        if any(w < 0 for w in self.scale_weights) or self.scale_weights[-1] <= 0:
            raise LossError("scale weights must be nonnegative, finest > 0")


def _as_batch(x, dtype):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    return x


def _identity_grid(B, H, W, dtype):
    gx, gy = np.meshgrid(np.arange(W, dtype=dtype), np.arange(H, dtype=dtype))
    grid = np.stack([gx, gy])[None]
    return np.broadcast_to(grid, (B, 2, H, W)).copy()


def warp(image, flow):
    """Sample ``image`` at (x + u, y + v); both on the tape."""
    image = ad.as_tensor(image)
    B, C, H, W = image.shape
    grid = ad.constant(_identity_grid(B, H, W, image.dtype), image.dtype)
    coords = ad.add(flow, grid)
    return ad.bilinear_sample(image, coords)


def photometric_loss(i_start, i_end, flow, eta=1e-3, r=0.45):
    """Charbonnier-penalized residual between start frame and warped end frame.

    ``i_start``/``i_end`` are [H,W] or [B,1,H,W] arrays (treated as
    constants); ``flow`` is a [B,2,H,W] tensor (or [2,H,W]).
    """
    flow = ad.as_tensor(flow)
    if flow.data.ndim == 3:
        flow = ad.reshape(flow, (1,) + flow.shape)
    dtype = flow.dtype
    a = _as_batch(i_start, dtype)
    b = _as_batch(i_end, dtype)
    if a.ndim == 3:
        a, b = a[:, None], b[:, None]
    if a.shape[-2:] != flow.shape[-2:]:
        raise LossError("image %r and flow %r sizes differ"
                        % (a.shape, flow.shape))
    warped = warp(ad.constant(b, dtype), flow)
    resid = ad.sub(ad.constant(a, dtype), warped)
    return ad.tsum(ad.charbonnier(resid, eta, r))


def smoothness_loss(flow):
    """L1 neighbor-difference penalty on a flow tensor."""
    return ad.smoothness_sum(flow)


def multi_scale_terms(scales, i_start, i_end, cfg):
    """Scale-weighted photometric and smoothness sums, as two tensors.

    ``scales`` is a MultiScaleFlow (coarsest first); images are average-
    pooled to each prediction scale.
    """
    flows = scales.flows
    if len(cfg.scale_weights) != len(flows):
        raise LossError("need one weight per scale")
    dtype = flows[0].dtype
    a = _as_batch(i_start, dtype)
    b = _as_batch(i_end, dtype)
    if a.ndim == 3:
        a, b = a[:, None], b[:, None]
    H = a.shape[-2]
    photo_total, smooth_total = None, None
    for flow, weight in zip(flows, cfg.scale_weights):
        if weight == 0.0:
            continue
        factor = H // flow.shape[-2]
        ap = ad.avg_pool2(ad.constant(a, dtype), factor)
        bp = ad.avg_pool2(ad.constant(b, dtype), factor)
        photo = ad.scale(photometric_loss(ap.data, bp.data, flow,
                                          eta=cfg.eta, r=cfg.r), weight)
        smooth = ad.scale(smoothness_loss(flow), weight)
        photo_total = photo if photo_total is None else ad.add(photo_total, photo)
        smooth_total = smooth if smooth_total is None else ad.add(smooth_total, smooth)
    return photo_total, smooth_total


def total_loss(scales, i_start, i_end, cfg):
    """Weighted multi-scale photometric loss plus weighted smoothness."""
    photo, smooth = multi_scale_terms(scales, i_start, i_end, cfg)
    return ad.add(photo, ad.scale(smooth, cfg.smooth_weight))
