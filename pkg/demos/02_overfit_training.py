"""Overfit the fused network on a single synthetic sample.

The loss is fully unsupervised (photometric warping plus smoothness);
ground truth is used only to report the endpoint error as training
proceeds. A couple hundred steps on a CPU drive the error well under
half a pixel.
"""

import numpy as np

from evfusion import (Adam, FusionConfig, LossConfig, Sample, SceneSpec,
                      SifConfig, build, discretize, generate_events,
                      synth_sequence)
from evfusion.evaluation import EvalMask, FlowField, aee
from evfusion.training import train_step

rng = np.random.default_rng(5)
raw = rng.random((160, 160))
texture = np.zeros_like(raw)
for dy in range(-2, 3):                       # mild blur: smoother gradients
    for dx in range(-2, 3):
        texture += np.roll(np.roll(raw, dy, 0), dx, 1)
texture /= 25.0

spec = SceneSpec(texture, (2.0, 0.0), num_frames=3, frame_interval=10000,
                 theta=0.15, height=64, width=64)
frames, flows = synth_sequence(spec)
stream = generate_events(frames, spec.theta).slice_window(0, 10000)
sample = Sample(discretize(stream, 5).data.astype(np.float32),
                np.stack(frames.frames[:2]).astype(np.float32),
                flows[0])
print("sample ready: %d events, true flow (2, 0) px" % len(stream))

model = build(FusionConfig(variant="early", base_channels=8, n_steps=5,
                           input_hw=(64, 64), sif=SifConfig()), seed=0)
opt = Adam(model.params, lr=1e-3)
loss_cfg = LossConfig()
gt = FlowField.from_array(sample.flow)

for step in range(1, 201):
    total, photo, smooth, scales = train_step(model, [sample], opt, loss_cfg)
    if step % 20 == 0:
        est = FlowField.from_array(scales.flows[-1].data[0])
        err = aee(est, gt, EvalMask.full(gt.u.shape))
        print("step %3d  loss %9.3f  (photo %9.3f, smooth %8.1f)  AEE %.3f px"
              % (step, total, photo, smooth, err))

est = FlowField.from_array(scales.flows[-1].data[0])
print("final mean flow estimate: u=%.2f, v=%.2f (target 2.00, 0.00)"
      % (est.u.mean(), est.v.mean()))
