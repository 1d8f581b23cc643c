"""Simulate an event camera watching a translating texture.

Builds a random scene, emits threshold-crossing events, discretizes them
into the binary spike volume the network consumes, and writes the frames
and the event stream to disk in their interchange formats.
"""

import os

import numpy as np

from evfusion import SceneSpec, discretize, generate_events, synth_sequence
from evfusion.io import write_aer, write_pgm

out_dir = os.path.join(os.path.dirname(__file__), "out_synthetic")
os.makedirs(out_dir, exist_ok=True)

rng = np.random.default_rng(0)
texture = rng.random((160, 160))

spec = SceneSpec(texture=texture, motion=(2.0, 1.0), num_frames=4,
                 frame_interval=10000, theta=0.2, height=64, width=64)
frames, flows = synth_sequence(spec)
print("rendered %d frames of %s, ground-truth flow (u, v) = (%.1f, %.1f) px"
      % (len(frames), frames.shape, flows[0][0, 0, 0], flows[0][1, 0, 0]))

stream = generate_events(frames, spec.theta)
print("emitted %d events over %d us" % (len(stream), stream.t_end))
on = sum(1 for e in stream.events if e.p > 0)
print("polarity split: %d ON / %d OFF" % (on, len(stream) - on))

# one network input: the window between the first two frames
window = stream.slice_window(0, 10000)
volume = discretize(window, n_steps=5)
print("spike volume %s carries %d active entries (%.2f%% occupancy)"
      % (volume.data.shape, volume.data.sum(),
         100.0 * volume.data.mean()))

for k, frame in enumerate(frames.frames):
    write_pgm(frame, os.path.join(out_dir, "frame_%d.pgm" % k))
write_aer(window, os.path.join(out_dir, "window.aer"))
print("wrote frames and window.aer to", out_dir)
