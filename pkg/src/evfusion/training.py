"""Training loop: Adam optimizer, step schedule, augmentation, logging.

Gradients flow through the whole recorded graph, including every
spiking time-step (the per-step contributions of a shared weight sum on
the tape), so one backward call realizes backpropagation through time.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .evaluation import EmptyMaskError, EvalMask, FlowField, aee, event_mask
from .events import SpikeVolume
from .losses import LossConfig, multi_scale_terms
from .network import forward


class TrainError(ValueError):
    pass


class NumericsError(RuntimeError):
    """Non-finite value encountered; message names the first bad tensor."""


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    epochs: int = 40
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crop_size: int = 32
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr0 < 0 or self.epochs < 0 or self.batch_size < 1:
            raise TrainError("lr0/epochs/batch_size must be nonnegative")
        if self.crop_size % 16:
            raise TrainError("crop_size must be divisible by 16")


def lr_schedule(epoch, lr0):
    """Multiply by 0.7 at epochs 5, 10, 15, 20 and every 10 epochs after."""
    if epoch < 0:
        raise TrainError("epoch must be nonnegative")
    if epoch < 30:
        decays = min(epoch // 5, 4)
    else:
        decays = 4 + (epoch - 20) // 10
    return lr0 * 0.7 ** decays


class Adam:
    """Adaptive-moment optimizer over a model's parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load(self, state):
        self.t = int(state["t"])
        for k in self.m:
            if k in state["m"]:
                self.m[k] = np.asarray(state["m"][k])
                self.v[k] = np.asarray(state["v"][k])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One training sample: spike volume, frame pair, optional ground truth."""

    spikes: np.ndarray      # [N, 4, H, W]
    frames: np.ndarray      # [frame_channels, H, W]
    flow: np.ndarray = None  # [2, H, W] ground truth, for logging only


def augment(sample, crop_size, flip_prob, rng):
    """Shared random crop and flips across spikes, frames, and flow.

    A horizontal flip mirrors columns and negates u; a vertical flip
    mirrors rows and negates v. Event channels keep their polarity.
    """
    H, W = sample.frames.shape[-2:]
    ch = cw = crop_size
    if H < ch or W < cw:
        raise TrainError("sample %dx%d smaller than crop %d" % (H, W, crop_size))
    y0 = int(rng.integers(0, H - ch + 1))
    x0 = int(rng.integers(0, W - cw + 1))
    flip_h = bool(rng.random() < flip_prob)
    flip_v = bool(rng.random() < flip_prob)

    def cut(a):
        return a[..., y0:y0 + ch, x0:x0 + cw]

    def flip(a):
        if flip_h:
            a = a[..., :, ::-1]
        if flip_v:
            a = a[..., ::-1, :]
        return np.ascontiguousarray(a)

    spikes = flip(cut(sample.spikes))
    frames = flip(cut(sample.frames))
    flow = None
    if sample.flow is not None:
        flow = flip(cut(sample.flow)).copy()
        if flip_h:
            flow[0] = -flow[0]
        if flip_v:
            flow[1] = -flow[1]
    return Sample(spikes, frames, flow)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _check_finite(value, name):
    if not np.isfinite(value):
        raise NumericsError("non-finite value in %s" % name)


def _sample_aee(flow_pred, sample):
    """AEE over all pixels and over event-active pixels, or None/'n/a'."""
    if sample.flow is None:
        return None, None
    est = FlowField.from_array(flow_pred)
    gt = FlowField.from_array(sample.flow)
    all_err = aee(est, gt, EvalMask.full(gt.u.shape))
    try:
        ev_err = aee(est, gt, event_mask(SpikeVolume(sample.spikes,
                                                     sample.spikes.shape[0])))
    except EmptyMaskError:
        ev_err = "n/a"
    return all_err, ev_err


def train_step(model, batch, optimizer, loss_cfg):
    """One forward/backward/update on a list of samples; returns losses."""
    spikes = np.stack([s.spikes for s in batch])
    frames = np.stack([s.frames for s in batch])
    scales = forward(model, spikes, frames, train=True)
    for i, fl in enumerate(scales.flows):
        if not np.isfinite(fl.data).all():
            raise NumericsError("non-finite value in flow prediction at scale %d"
                                % i)
    i_start = frames[:, :1]
    i_end = frames[:, -1:]
    photo, smooth = multi_scale_terms(scales, i_start[:, 0], i_end[:, 0], loss_cfg)
    total = ad.add(photo, ad.scale(smooth, loss_cfg.smooth_weight))
    _check_finite(photo.item(), "photometric loss")
    _check_finite(smooth.item(), "smoothness loss")
    model.zero_grad()
    total.backward()
    for name, p in model.params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericsError("non-finite gradient in parameter %s" % name)
    optimizer.step()
    return total.item(), photo.item(), smooth.item(), scales


def train(model, dataset, train_cfg, loss_cfg=None, log_path=None,
          checkpoint_fn=None, do_augment=True):
    """Optimize ``model`` on ``dataset`` (a list of Samples).

    Shuffling and augmentation draw from a generator reseeded per epoch
    with seed + epoch, so resuming from a checkpoint at epoch k replays
    the identical remainder of the run.

    Returns the per-step log as a list of dicts (also written as CSV to
    ``log_path`` when given).
    """
    loss_cfg = loss_cfg or LossConfig()
    optimizer = Adam(model.params, train_cfg.lr0, train_cfg.beta1,
                     train_cfg.beta2, train_cfg.adam_eps)
    log = []
    start_epoch = getattr(model, "_epoch", 0)
    if hasattr(model, "_opt_state"):
        optimizer.load(model._opt_state)
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng(train_cfg.seed + epoch)
        optimizer.lr = lr_schedule(epoch, train_cfg.lr0)
        order = rng.permutation(len(dataset))
        for step_i in range(0, len(order), train_cfg.batch_size):
            idx = order[step_i:step_i + train_cfg.batch_size]
            batch = []
            for j in idx:
                s = dataset[j]
                if do_augment:
                    s = augment(s, train_cfg.crop_size, train_cfg.flip_prob, rng)
                batch.append(s)
            total, photo, smooth, scales = train_step(model, batch, optimizer,
                                                      loss_cfg)
            finest = scales.flows[-1].data
            aee_all, aee_ev = _sample_aee(finest[0], batch[0])
            log.append({
                "epoch": epoch, "step": step_i // train_cfg.batch_size,
                "lr": optimizer.lr, "loss_total": total, "loss_photo": photo,
                "loss_smooth": smooth,
                "aee_all": aee_all if aee_all is not None else "",
                "aee_event": aee_ev if aee_ev is not None else "",
            })
        model._epoch = epoch + 1
        model._opt_state = optimizer.state()
        if checkpoint_fn is not None:
            checkpoint_fn(model, epoch)
    if log_path is not None:
        write_log_csv(log, log_path)
    return log


def write_log_csv(log, path):
    cols = ["epoch", "step", "lr", "loss_total", "loss_photo", "loss_smooth",
            "aee_all", "aee_event"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for row in log:
            wr.writerow(row)
