"""Unsupervised optical flow from fused event and frame streams.

Submodules:

* ``events``     - event generation, discretization, scene synthesis
* ``neurons``    - LeakyReLU, signed and plain integrate-and-fire models
* ``autodiff``   - tensors with a reverse-mode tape (conv, BN, warping, ...)
* ``network``    - the fused flow network (early/late fusion, ANN baseline)
* ``losses``     - photometric + smoothness unsupervised losses
* ``training``   - Adam loop, schedule, augmentation
* ``evaluation`` - endpoint error, flow rendering
* ``energy``     - synaptic-operation and energy profiling
* ``io``         - AER / PGM / flow / checkpoint file formats
* ``cli``        - command-line entry point
"""

from .autodiff import Tensor
from .energy import EnergyReport, OpsReport, compare, energy, profile
from .evaluation import EvalMask, FlowField, aee, event_mask, flow_to_color
from .events import (Event, EventStream, FrameSequence, SceneSpec, SpikeVolume,
                     discretize, generate_events, synth_sequence)
from .losses import LossConfig, photometric_loss, smoothness_loss, total_loss
from .network import FusionConfig, Model, MultiScaleFlow, build, count_params, forward
from .neurons import MembraneState, SifConfig, if_step, leaky_relu, sif_step, sif_surrogate
from .training import Adam, Sample, TrainConfig, augment, lr_schedule, train

__version__ = "0.1.0"
