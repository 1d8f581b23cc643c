"""Activation and spiking neuron models.

LeakyReLU for the analog branch; signed integrate-and-fire (SIF) and
plain integrate-and-fire (IF) dynamics for the spiking branch, together
with the surrogate gradient used during backpropagation.
"""

from dataclasses import dataclass

import numpy as np


class NeuronError(Exception):
    pass


@dataclass(frozen=True)
class SifConfig:
    """Firing thresholds of a signed integrate-and-fire neuron.

    ``v_th_neg_mag`` is the magnitude of the negative threshold: the
    neuron fires -1 when its potential drops below ``-v_th_neg_mag``.
    ``soft_reset`` subtracts the crossed threshold instead of resetting
    to zero; the default is a hard reset.
    """

    v_th_pos: float = 0.75
    v_th_neg_mag: float = 7.5
    soft_reset: bool = False

    def __post_init__(self):
        if self.v_th_pos <= 0 or self.v_th_neg_mag <= 0:
            raise NeuronError("thresholds must be positive")


class MembraneState:
    """Per-neuron potential array owned by a single forward sequence."""

    def __init__(self, shape, dtype=np.float32):
        self.v = np.zeros(shape, dtype=dtype)

    def reset(self):
        self.v[...] = 0.0


def leaky_relu(x, alpha):
    """x for x > 0, alpha * x otherwise."""
    x = np.asarray(x)
    return np.where(x > 0, x, alpha * x)


def leaky_relu_grad(x, alpha):
    """Derivative of leaky_relu; the tie at x == 0 takes the alpha branch."""
    x = np.asarray(x)
    return np.where(x > 0, np.ones_like(x), np.full_like(x, alpha))


def sif_fire(v, cfg):
    """Spike outputs {-1, 0, +1} for post-integration potentials ``v``.

    Strict inequalities: a potential exactly at threshold does not fire.
    """
    v = np.asarray(v)
    return (v > cfg.v_th_pos).astype(v.dtype) - (v < -cfg.v_th_neg_mag).astype(v.dtype)


def sif_surrogate(v, cfg):
    """Surrogate gradient factor of the SIF firing function.

    1/v_th_pos on the positive crossing, 1/v_th_neg_mag on the negative
    crossing (both positive magnitudes), 0 elsewhere.
    """
    v = np.asarray(v)
    g = np.zeros_like(v)
    g[v > cfg.v_th_pos] = 1.0 / cfg.v_th_pos
    g[v < -cfg.v_th_neg_mag] = 1.0 / cfg.v_th_neg_mag
    return g


def sif_step(state, weighted_input, cfg):
    """One SIF time-step: integrate, fire on either threshold, reset.

    Returns the spike array; ``state.v`` is updated in place.
    """
    w = np.asarray(weighted_input)
    if w.shape != state.v.shape:
        raise NeuronError("input shape %r does not match state %r"
                          % (w.shape, state.v.shape))
    state.v += w
    spikes = sif_fire(state.v, cfg)
    fired = spikes != 0
    if cfg.soft_reset:
        state.v[fired] -= np.where(spikes[fired] > 0, cfg.v_th_pos, -cfg.v_th_neg_mag)
    else:
        state.v[fired] = 0.0
    return spikes


def if_step(state, weighted_input, v_th_pos, soft_reset=False):
    """One IF time-step: positive threshold only, binary {0, 1} output.

    Negative potentials are never reset, which is exactly the
    "dead neuron" pathology the signed model avoids.
    """
    if v_th_pos <= 0:
        raise NeuronError("threshold must be positive")
    w = np.asarray(weighted_input)
    if w.shape != state.v.shape:
        raise NeuronError("input shape %r does not match state %r"
                          % (w.shape, state.v.shape))
    state.v += w
    spikes = (state.v > v_th_pos).astype(state.v.dtype)
    fired = spikes != 0
    if soft_reset:
        state.v[fired] -= v_th_pos
    else:
        state.v[fired] = 0.0
    return spikes
