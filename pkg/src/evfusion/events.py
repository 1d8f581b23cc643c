"""Event streams: generation from frames, discretization, scene synthesis.

An event camera is modeled per pixel as a comparator on log intensity:
whenever the (linearly interpolated) log intensity drifts a threshold
away from a per-pixel reference level, an ON/OFF event is emitted and
the reference moves by one threshold step. Streams are discretized into
binary spike volumes with former/latter halves and ON/OFF channels.
"""

from dataclasses import dataclass, field

import numpy as np

INTENSITY_FLOOR = 1e-3  # clamp before log so black pixels stay finite


class EventError(ValueError):
    """Invalid event-pipeline input."""


@dataclass(frozen=True)
class Event:
    """One address-event tuple: pixel location, timestamp (us), polarity."""

    x: int
    y: int
    t: int
    p: int

    def __post_init__(self):
        if self.p not in (1, -1):
            raise EventError("polarity must be +1 or -1, got %r" % (self.p,))
        if self.t < 0:
            raise EventError("timestamp must be non-negative")


@dataclass
class EventStream:
    """Time-ordered events within a window on a fixed sensor resolution."""

    events: list
    width: int
    height: int
    t_start: int
    t_end: int

    def __post_init__(self):
        last = None
        for e in self.events:
            if not (0 <= e.x < self.width and 0 <= e.y < self.height):
                raise EventError("event at (%d,%d) outside %dx%d sensor"
                                 % (e.x, e.y, self.width, self.height))
            if not (self.t_start <= e.t <= self.t_end):
                raise EventError("event time %d outside window [%d,%d]"
                                 % (e.t, self.t_start, self.t_end))
            if last is not None and e.t < last:
                raise EventError("timestamps must be non-decreasing")
            last = e.t

    def __len__(self):
        return len(self.events)

    def slice_window(self, t_start, t_end):
        """Sub-stream of events with t in [t_start, t_end]."""
        evs = [e for e in self.events if t_start <= e.t <= t_end]
        return EventStream(evs, self.width, self.height, t_start, t_end)


@dataclass
class SpikeVolume:
    """Binary event frames [N, 4, H, W].

    Channel order: former-ON, former-OFF, latter-ON, latter-OFF, where
    former/latter are the two halves of the stream window.
    """

    data: np.ndarray
    n_steps: int

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 4 or d.shape[0] != self.n_steps or d.shape[1] != 4:
            raise EventError("spike volume must be [N,4,H,W], got %r" % (d.shape,))
        if not np.isin(d, (0, 1)).all():
            raise EventError("spike volume entries must be 0 or 1")
        self.data = d


@dataclass
class FrameSequence:
    """Grayscale frames (intensity in [0,1]) with strictly increasing times."""

    frames: list
    timestamps: list

    def __post_init__(self):
        if len(self.frames) != len(self.timestamps):
            raise EventError("frames and timestamps length mismatch")
        shapes = {np.asarray(f).shape for f in self.frames}
        if len(shapes) > 1:
            raise EventError("all frames must share one shape, got %r" % (shapes,))
        ts = list(self.timestamps)
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise EventError("timestamps must be strictly increasing")
        self.frames = [np.asarray(f, dtype=np.float64) for f in self.frames]

    @property
    def shape(self):
        return self.frames[0].shape

    def __len__(self):
        return len(self.frames)


@dataclass
class SceneSpec:
    """Recipe for a translating-texture synthetic scene.

    ``motion`` is either one (dx, dy) applied every frame or a sequence
    of per-frame translations, in pixels per frame.
    """

    texture: np.ndarray
    motion: object
    num_frames: int
    frame_interval: int
    theta: float
    height: int = 0            # output crop; 0 means full texture height
    width: int = 0

    def __post_init__(self):
        if self.num_frames < 2:
            raise EventError("need at least 2 frames")
        if self.theta <= 0:
            raise EventError("theta must be positive")
        self.texture = np.asarray(self.texture, dtype=np.float64)
        th, tw = self.texture.shape
        if self.height <= 0:
            self.height = th
        if self.width <= 0:
            self.width = tw

    def per_frame_motion(self):
        m = np.asarray(self.motion, dtype=np.float64)
        if m.ndim == 1:
            m = np.tile(m, (self.num_frames - 1, 1))
        if m.shape != (self.num_frames - 1, 2):
            raise EventError("motion must be (dx,dy) or one pair per interval")
        return m


# ---------------------------------------------------------------------------
# event generation
# ---------------------------------------------------------------------------

def generate_events(frames, theta, substeps=16):
    """Emit threshold-crossing events from a frame sequence.

    Log intensity is interpolated linearly over ``substeps`` sub-intervals
    between consecutive frames; each time it drifts ``theta`` (or a
    multiple) away from the per-pixel reference level, an event is
    emitted at the crossing sub-step and the reference steps by theta.
    """
    if len(frames) < 2:
        raise EventError("need at least 2 frames to generate events")
    if theta <= 0:
        raise EventError("theta must be positive")
    substeps = max(1, int(substeps))
    H, W = frames.shape
    logs = [np.log(np.maximum(f, INTENSITY_FLOOR)) for f in frames.frames]
    l_ref = logs[0].copy()
    xs, ys, ts, ps = [], [], [], []
    for k in range(len(frames) - 1):
        t0, t1 = frames.timestamps[k], frames.timestamps[k + 1]
        l0, l1 = logs[k], logs[k + 1]
        for s in range(1, substeps + 1):
            frac = s / substeps
            l_cur = l0 + (l1 - l0) * frac
            t_cur = int(round(t0 + (t1 - t0) * frac))
            diff = l_cur - l_ref
            crossed = np.abs(diff) >= theta
            while crossed.any():
                yy, xx = np.nonzero(crossed)
                pol = np.sign(diff[yy, xx]).astype(np.int64)
                xs.append(xx)
                ys.append(yy)
                ts.append(np.full(len(xx), t_cur, dtype=np.int64))
                ps.append(pol)
                l_ref[yy, xx] += pol * theta
                diff = l_cur - l_ref
                crossed = np.abs(diff) >= theta
    if xs:
        xs = np.concatenate(xs)
        ys = np.concatenate(ys)
        ts = np.concatenate(ts)
        ps = np.concatenate(ps)
        order = np.lexsort((ps, xs, ys, ts))
        events = [Event(int(xs[i]), int(ys[i]), int(ts[i]), int(ps[i]))
                  for i in order]
    else:
        events = []
    return EventStream(events, W, H,
                       int(frames.timestamps[0]), int(frames.timestamps[-1]))


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def discretize(stream, n_steps):
    """Binary spike volume [N, 4, H, W] from a stream.

    The window splits at its midpoint; each half splits into N equal
    half-open bins (the final bin is closed at t_end). An entry is 1 iff
    at least one event of the channel's polarity lands in that
    pixel/bin; multiple events saturate to 1.
    """
    if n_steps < 1:
        raise EventError("n_steps must be >= 1")
    t0, t1 = stream.t_start, stream.t_end
    if t1 <= t0:
        raise EventError("stream window must have positive length")
    t_mid = (t0 + t1) / 2.0
    vol = np.zeros((n_steps, 4, stream.height, stream.width), dtype=np.uint8)
    half = (t_mid - t0)
    for e in stream.events:
        if e.t < t_mid:
            group = 0
            idx = int((e.t - t0) / half * n_steps)
        else:
            group = 1
            idx = int((e.t - t_mid) / (t1 - t_mid) * n_steps)
        idx = min(idx, n_steps - 1)
        chan = 2 * group + (0 if e.p > 0 else 1)
        vol[idx, chan, e.y, e.x] = 1
    return SpikeVolume(vol, n_steps)


# ---------------------------------------------------------------------------
# scene synthesis
# ---------------------------------------------------------------------------

def _bilinear_crop(texture, y_off, x_off, H, W):
    """Sample an HxW crop at real-valued offset (y_off, x_off)."""
    th, tw = texture.shape
    ys = np.arange(H)[:, None] + y_off
    xs = np.arange(W)[None, :] + x_off
    if ys.min() < 0 or xs.min() < 0 or ys.max() > th - 1 or xs.max() > tw - 1:
        raise EventError("crop samples outside the texture")
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, th - 1)
    x1 = np.minimum(x0 + 1, tw - 1)
    fy, fx = ys - y0, xs - x0
    return ((1 - fy) * ((1 - fx) * texture[y0, x0] + fx * texture[y0, x1])
            + fy * ((1 - fx) * texture[y1, x0] + fx * texture[y1, x1]))


def synth_sequence(spec):
    """Render a translating-texture sequence with known ground truth.

    Returns (FrameSequence, flows) where flows[k] is the [2, H, W]
    ground-truth flow (u, v) between frames k and k+1, constant over the
    image and equal to the per-frame translation.
    """
    motion = spec.per_frame_motion()
    H, W = spec.height, spec.width
    th, tw = spec.texture.shape
    # anchor the first crop so cumulative motion stays inside the texture
    cum = np.vstack([[0.0, 0.0], np.cumsum(motion, axis=0)])
    x0 = (tw - W) / 2.0 + (cum[:, 0].max() + cum[:, 0].min()) / 2.0
    y0 = (th - H) / 2.0 + (cum[:, 1].max() + cum[:, 1].min()) / 2.0
    frames, times = [], []
    for k in range(spec.num_frames):
        f = _bilinear_crop(spec.texture, y0 - cum[k, 1], x0 - cum[k, 0], H, W)
        frames.append(np.clip(f, 0.0, 1.0))
        times.append(k * spec.frame_interval)
    flows = []
    for k in range(spec.num_frames - 1):
        flow = np.empty((2, H, W), dtype=np.float64)
        flow[0] = motion[k, 0]
        flow[1] = motion[k, 1]
        flows.append(flow)
    return FrameSequence(frames, times), flows
