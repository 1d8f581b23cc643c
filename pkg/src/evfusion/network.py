"""Fused spiking/analog flow network: construction and forward pass.

Three variants share one U-Net-shaped skeleton (four stride-2 encoder
stages, two residual blocks, four decoder stages with per-stage flow
heads):

* ``early``  - spiking and analog encoder branches at half width, fused
  by channel concatenation after each encoder stage; residual blocks and
  decoder are full-width analog.
* ``late``   - the half-width branches extend through the residual
  blocks; fusion happens after them.
* ``ann_baseline`` - a single full-width analog path fed frames only.

The spiking branch runs the event volume step by step; each layer's
post-threshold spike outputs are summed into a per-layer accumulator,
and the accumulated outputs feed the fusion and skip paths.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .events import SpikeVolume
from .neurons import SifConfig

VARIANTS = ("early", "late", "ann_baseline")


class NetworkError(ValueError):
    pass


@dataclass
class FusionConfig:
    variant: str = "early"
    base_channels: int = 64
    n_steps: int = 5
    sif: SifConfig = field(default_factory=SifConfig)
    alpha: float = 0.1
    input_hw: tuple = (256, 256)
    frame_channels: int = 2
    neuron: str = "sif"          # "sif" or "if" (ablation)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise NetworkError("unknown variant %r" % self.variant)
        if self.base_channels % 2:
            raise NetworkError("base_channels must be even")
        h, w = self.input_hw
        if h % 16 or w % 16:
            raise NetworkError("input size must be divisible by 16")
        if self.neuron not in ("sif", "if"):
            raise NetworkError("neuron must be 'sif' or 'if'")
        if not (0 < self.alpha < 1):
            raise NetworkError("alpha must be in (0,1)")

    def to_dict(self):
        return {
            "variant": self.variant,
            "base_channels": self.base_channels,
            "n_steps": self.n_steps,
            "v_th_pos": self.sif.v_th_pos,
            "v_th_neg_mag": self.sif.v_th_neg_mag,
            "alpha": self.alpha,
            "input_h": self.input_hw[0],
            "input_w": self.input_hw[1],
            "frame_channels": self.frame_channels,
            "neuron": self.neuron,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            variant=str(d.get("variant", "early")),
            base_channels=int(d.get("base_channels", 64)),
            n_steps=int(d.get("n_steps", 5)),
            sif=SifConfig(float(d.get("v_th_pos", 0.75)),
                          float(d.get("v_th_neg_mag", 7.5))),
            alpha=float(d.get("alpha", 0.1)),
            input_hw=(int(d.get("input_h", 256)), int(d.get("input_w", 256))),
            frame_channels=int(d.get("frame_channels", 2)),
            neuron=str(d.get("neuron", "sif")),
        )


@dataclass
class LayerSpec:
    name: str
    kind: str          # "conv" or "deconv"
    cin: int
    cout: int
    k: int
    stride: int
    pad: int
    role: str          # snn_encoder | ann_encoder | residual | decoder | flow_head
    bn: bool
    act: str           # "lrelu" | "spike" | "none"


@dataclass
class MultiScaleFlow:
    """Flow predictions at 1/8, 1/4, 1/2, 1/1 of input resolution."""

    flows: list        # four Tensors, coarsest first, each [B, 2, h, w]


class Model:
    """Layer specs plus parameter tensors and batch-norm running stats."""

    def __init__(self, config, specs, seed=0):
        self.config = config
        self.specs = {s.name: s for s in specs}
        self.order = [s.name for s in specs]
        self.params = {}
        self.stats = {}
        rng = np.random.default_rng(seed)
        for s in specs:
            fan_in = s.cin * s.k * s.k
            bound = np.sqrt(6.0 / fan_in)
            if s.kind == "conv":
                wshape = (s.cout, s.cin, s.k, s.k)
            else:
                wshape = (s.cin, s.cout, s.k, s.k)
            w = rng.uniform(-bound, bound, size=wshape).astype(np.float32)
            self.params[s.name + ".w"] = ad.parameter(w, name=s.name + ".w")
            self.params[s.name + ".b"] = ad.parameter(
                np.zeros(s.cout, dtype=np.float32), name=s.name + ".b")
            if s.bn:
                self.params[s.name + ".gamma"] = ad.parameter(
                    np.ones(s.cout, dtype=np.float32), name=s.name + ".gamma")
                self.params[s.name + ".beta"] = ad.parameter(
                    np.zeros(s.cout, dtype=np.float32), name=s.name + ".beta")
                self.stats[s.name] = RunningStats(s.cout)

    # -- parameter access --------------------------------------------------

    def parameters(self):
        return dict(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        out = {name: p.data.copy() for name, p in self.params.items()}
        for lname, st in self.stats.items():
            out[lname + ".running_mean"] = st.mean.copy()
            out[lname + ".running_var"] = st.var.copy()
        return out

    def load_state_dict(self, state):
        for name, p in self.params.items():
            if name in state:
                p.data = np.asarray(state[name], dtype=p.dtype).reshape(p.shape)
        for lname, st in self.stats.items():
            if lname + ".running_mean" in state:
                st.mean = np.asarray(state[lname + ".running_mean"],
                                     dtype=st.mean.dtype)
                st.var = np.asarray(state[lname + ".running_var"],
                                    dtype=st.var.dtype)

    def astype(self, dtype):
        """Cast all parameters and stats in place (for 64-bit grad checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for st in self.stats.values():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _encoder_specs(prefix, cin, widths, role, bn, act):
    specs = []
    for i, cout in enumerate(widths, 1):
        specs.append(LayerSpec("%s%d" % (prefix, i), "conv", cin, cout,
                               3, 2, 1, role, bn, act))
        cin = cout
    return specs


def _residual_specs(prefix, ch, role, bn, act):
    specs = []
    for b in (1, 2):
        specs.append(LayerSpec("%s%d.conv1" % (prefix, b), "conv", ch, ch,
                               3, 1, 1, role, bn, act))
        specs.append(LayerSpec("%s%d.conv2" % (prefix, b), "conv", ch, ch,
                               3, 1, 1, role, bn, act))
    return specs


def build(config, seed=0):
    """Construct a model with freshly initialized parameters."""
    F = config.base_channels
    half = F // 2
    full_widths = [F, 2 * F, 4 * F, 8 * F]
    narrow_widths = [half, F, 2 * F, 4 * F]
    specs = []
    if config.variant == "ann_baseline":
        specs += _encoder_specs("enc", config.frame_channels, full_widths,
                                "ann_encoder", True, "lrelu")
    else:
        specs += _encoder_specs("snn_enc", 4, narrow_widths,
                                "snn_encoder", False, "spike")
        specs += _encoder_specs("ann_enc", config.frame_channels, narrow_widths,
                                "ann_encoder", True, "lrelu")
    if config.variant == "late":
        specs += _residual_specs("snn_res", 4 * F, "snn_encoder", False, "spike")
        specs += _residual_specs("ann_res", 4 * F, "residual", True, "lrelu")
    else:
        specs += _residual_specs("res", 8 * F, "residual", True, "lrelu")
    # decoder: deconv widths mirror the encoder, flow heads at each scale
    dec_in = [8 * F, 8 * F + 2, 4 * F + 2, 2 * F + 2]
    dec_out = [4 * F, 2 * F, F, half]
    for i in range(4):
        specs.append(LayerSpec("deconv%d" % (i + 1), "deconv",
                               dec_in[i], dec_out[i], 4, 2, 1,
                               "decoder", False, "lrelu"))
        specs.append(LayerSpec("flow%d" % (i + 1), "conv",
                               dec_out[i], 2, 3, 1, 1,
                               "flow_head", False, "none"))
    return Model(config, specs, seed=seed)


def count_params(model):
    """Per-role and total parameter counts."""
    by_role = {}
    total = 0
    for name in model.order:
        s = model.specs[name]
        n = s.cout * s.cin * s.k * s.k + s.cout
        if s.bn:
            n += 2 * s.cout
        by_role[s.role] = by_role.get(s.role, 0) + n
        total += n
    return by_role, total


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _spike_counter(profile, name, spec, x_data, n_steps):
    if profile is None:
        return
    rec = profile.setdefault(name, {
        "role": "snn", "spikes": 0, "neurons": spec.cin * x_data.shape[-2] * x_data.shape[-1],
        "fanout": spec.k * spec.k * spec.cout, "n_steps": n_steps,
    })
    rec["spikes"] += int(np.count_nonzero(x_data)) / x_data.shape[0]


def _record_ann(profile, name, spec, out_shape):
    if profile is None:
        return
    _, cout, ho, wo = out_shape
    profile[name] = {
        "role": "ann",
        "m_out": cout * ho * wo,
        "fanin": spec.cin * spec.k * spec.k,
    }


def _conv(model, name, x, profile=None):
    s = model.specs[name]
    out = ad.conv2d(x, model.params[name + ".w"], model.params[name + ".b"],
                    stride=s.stride, padding=s.pad)
    _record_ann(profile, name, s, out.shape)
    return out


def _ann_layer(model, name, x, train, profile=None):
    s = model.specs[name]
    out = _conv(model, name, x, profile=profile)
    if s.bn:
        out = ad.batch_norm(out, model.params[name + ".gamma"],
                            model.params[name + ".beta"],
                            model.stats[name], train)
    if s.act == "lrelu":
        out = ad.leaky_relu(out, model.config.alpha)
    return out


def _deconv_layer(model, name, x, profile=None):
    s = model.specs[name]
    out = ad.conv_transpose2d(x, model.params[name + ".w"],
                              model.params[name + ".b"],
                              stride=s.stride, padding=s.pad)
    _record_ann(profile, name, s, out.shape)
    return ad.leaky_relu(out, model.config.alpha)


def _ann_residual(model, prefix, x, train, profile=None):
    for b in (1, 2):
        h = _ann_layer(model, "%s%d.conv1" % (prefix, b), x, train, profile)
        h = _ann_layer(model, "%s%d.conv2" % (prefix, b), h, train, profile)
        x = ad.leaky_relu(ad.add(x, h), model.config.alpha)
    return x


def _fire(model, v):
    """Spike node plus the 0/1 carry mask for the membrane edge."""
    cfg = model.config.sif
    if model.config.neuron == "if":
        spikes = ad.if_node(v, cfg.v_th_pos)
    else:
        spikes = ad.sif_node(v, cfg)
    carry = (spikes.data == 0).astype(v.dtype)
    return spikes, ad.mask_scale(v, carry)


def _zeros_like_shape(shape, dtype):
    return ad.constant(np.zeros(shape, dtype=dtype))


def _snn_forward(model, spikes_bn, profile=None):
    """Run the spiking branch over all time-steps.

    ``spikes_bn`` is [B, N, 4, H, W]. Returns the per-stage accumulators
    (list of 4 Tensors) and, for the late variant, the accumulator after
    the spiking residual blocks.
    """
    cfg = model.config
    B, N = spikes_bn.shape[:2]
    dtype = model.params[model.order[0] + ".w"].dtype
    enc_names = ["snn_enc%d" % i for i in range(1, 5)]
    late = cfg.variant == "late"
    res_convs = []
    if late:
        res_convs = [("snn_res%d.conv1" % b, "snn_res%d.conv2" % b) for b in (1, 2)]

    v = {}          # membrane potential tensors, by layer name
    accs = [None] * 4
    res_acc = None
    for n in range(N):
        x = ad.constant(np.ascontiguousarray(spikes_bn[:, n]).astype(dtype))
        for i, name in enumerate(enc_names):
            spec = model.specs[name]
            _spike_counter(profile, name, spec, x.data, N)
            z = _conv(model, name, x)
            v_new = z if name not in v else ad.add(v[name], z)
            s, v[name] = _fire(model, v_new)
            accs[i] = s if accs[i] is None else ad.add(accs[i], s)
            x = s
        if late:
            for c1, c2 in res_convs:
                identity = x
                _spike_counter(profile, c1, model.specs[c1], x.data, N)
                z1 = _conv(model, c1, x)
                v1 = z1 if c1 not in v else ad.add(v[c1], z1)
                s1, v[c1] = _fire(model, v1)
                _spike_counter(profile, c2, model.specs[c2], s1.data, N)
                z2 = _conv(model, c2, s1)
                v2 = z2 if c2 not in v else ad.add(v[c2], z2)
                s2, v[c2] = _fire(model, v2)
                x = ad.add(s2, identity)    # identity skip in the spike domain
            res_acc = x if res_acc is None else ad.add(res_acc, x)
    return accs, res_acc


def forward(model, spikes, frames, train=False, profile=None):
    """Full forward pass to multi-scale flow.

    ``spikes``: SpikeVolume or array [N,4,H,W] or [B,N,4,H,W] (ignored
    by the ANN baseline, which accepts None). ``frames``: array
    [frame_channels, H, W] or [B, frame_channels, H, W].
    """
    cfg = model.config
    dtype = model.params[model.order[0] + ".w"].dtype
    frames = np.asarray(frames, dtype=dtype)
    if frames.ndim == 3:
        frames = frames[None]
    B, fc, H, W = frames.shape
    if fc != cfg.frame_channels:
        raise NetworkError("frames %r do not match frame_channels=%d"
                           % (frames.shape, cfg.frame_channels))
    if H % 16 or W % 16:
        raise NetworkError("input size %dx%d must be divisible by 16" % (H, W))
    frames_t = ad.constant(frames)

    if cfg.variant == "ann_baseline":
        skips = []
        x = frames_t
        for i in range(1, 5):
            x = _ann_layer(model, "enc%d" % i, x, train, profile)
            skips.append(x)
        fused = x
        res = _ann_residual(model, "res", fused, train, profile)
    else:
        if isinstance(spikes, SpikeVolume):
            sv = spikes.data[None]
        else:
            sv = np.asarray(spikes)
            if sv.ndim == 4:
                sv = sv[None]
        if sv.shape[0] != B or sv.shape[1] != cfg.n_steps or sv.shape[2] != 4 \
                or sv.shape[3:] != (H, W):
            raise NetworkError("spike volume %r does not match config" % (sv.shape,))
        snn_accs, snn_res_acc = _snn_forward(model, sv, profile=profile)
        ann_feats = []
        x = frames_t
        for i in range(1, 5):
            x = _ann_layer(model, "ann_enc%d" % i, x, train, profile)
            ann_feats.append(x)
        skips = [ad.concat([s, a], axis=1) for s, a in zip(snn_accs, ann_feats)]
        if cfg.variant == "late":
            ann_res = _ann_residual(model, "ann_res", ann_feats[-1], train, profile)
            res = ad.concat([snn_res_acc, ann_res], axis=1)
        else:
            res = _ann_residual(model, "res", skips[-1], train, profile)

    # decoder: each stage emits upsampled features and a flow prediction;
    # the next stage consumes them concatenated with the encoder skip.
    flows = []
    x = res
    for i in range(1, 5):
        d = _deconv_layer(model, "deconv%d" % i, x, profile)
        f = _conv(model, "flow%d" % i, d, profile)
        flows.append(f)
        if i < 4:
            skip = skips[3 - i]
            x = ad.concat([d, skip, f], axis=1)
    return MultiScaleFlow(flows)
