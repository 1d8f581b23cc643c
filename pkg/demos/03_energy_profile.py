"""Compare inference energy across the three architecture variants.

The spiking branch performs accumulate-only synaptic operations gated by
spikes (0.9 pJ each); analog layers perform dense multiply-accumulates
(4.6 pJ each). Sparse event activity is what makes the fused variants
cheap.
"""

import numpy as np

from evfusion import FusionConfig, SceneSpec, build, discretize, \
    generate_events, synth_sequence
from evfusion.energy import compare, energy, profile

rng = np.random.default_rng(1)
spec = SceneSpec(rng.random((160, 160)), (2.0, 0.0), num_frames=2,
                 frame_interval=10000, theta=0.2, height=64, width=64)
frames, _ = synth_sequence(spec)
stream = generate_events(frames, spec.theta)
spikes = discretize(stream, 5).data.astype(np.float32)[None]
imgs = np.stack(frames.frames).astype(np.float32)[None]

reports = []
for variant in ("ann_baseline", "early", "late"):
    model = build(FusionConfig(variant=variant, base_channels=16, n_steps=5,
                               input_hw=(64, 64)), seed=0)
    ops, _ = profile(model, None if variant == "ann_baseline" else spikes, imgs)
    per_layer, weighted = ops.mean_activity()
    print("%-13s ops_ann %.4g  ops_snn %.4g  spike activity %.3f%%"
          % (variant, ops.ops_ann, ops.ops_snn, 100 * weighted))
    reports.append(energy(ops, label=variant))

rows, table = compare(reports, baseline_index=0)
print()
print(table)
