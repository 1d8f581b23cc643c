"""Dense tensors with a reverse-mode differentiation tape.

Every primitive the flow network and its losses need is defined here:
convolution, transposed convolution, batch-norm, bilinear sampling, the
Charbonnier penalty, pooling/concat/elementwise plumbing, and the signed
spiking node whose backward pass is a surrogate gradient rather than a
true derivative.

Arrays are plain numpy, row-major. float32 is the training default;
gradient-check tests run everything in float64.
"""

import numpy as np

from .neurons import leaky_relu as _lrelu_np
from .neurons import leaky_relu_grad as _lrelu_grad_np
from .neurons import sif_fire, sif_surrogate


class AutodiffError(Exception):
    """Invalid use of the tape (bad shapes, repeated backward, ...)."""


class Tensor:
    """A numpy array plus an optional gradient and tape linkage.

    Tensors are created either as leaves (parameters or constants) or as
    the output of a primitive, in which case they hold a closure that
    pushes gradients to their parents.
    """

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # Gradient accumulation in the array's own dtype; reductions inside
        # primitives are done in float64 where it matters.
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse sweep from a scalar output.

        Populates ``grad`` on every reachable tensor with
        ``requires_grad=True``. May be called once per recorded graph.
        """
        if self.data.size != 1:
            raise AutodiffError("backward requires a scalar output, got shape %r"
                                % (self.shape,))
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        # Leaves are reused across tapes; only recorded (non-leaf) nodes
        # are single-shot.
        for node in topo:
            if node._consumed and node._backward is not None:
                raise AutodiffError("backward called twice on the same tape; "
                                    "rebuild the graph first")
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                node._consumed = True

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return "Tensor(shape=%r, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype, self.requires_grad)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x, dtype=np.float32):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def parameter(x, name=None):
    t = Tensor(np.asarray(x), requires_grad=True, name=name)
    return t


# ---------------------------------------------------------------------------
# elementwise / shape primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise AutodiffError("add: shape mismatch %r vs %r" % (a.shape, b.shape))
    out = _make(a.data + b.data, (a, b), None)

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad)
    out._backward = _bw if out.requires_grad else None
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise AutodiffError("sub: shape mismatch %r vs %r" % (a.shape, b.shape))
    out = _make(a.data - b.data, (a, b), None)

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(-out.grad)
    out._backward = _bw if out.requires_grad else None
    return out


def scale(a, c):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(c)
    out = _make(a.data * c, (a,), None)

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * c)
    out._backward = _bw if out.requires_grad else None
    return out


def tsum(a):
    """Full reduction to a scalar; accumulation in float64."""
    a = as_tensor(a)
    val = np.asarray(a.data.sum(dtype=np.float64)).astype(a.dtype).reshape(())
    out = _make(val, (a,), None)

    def _bw():
        if a.requires_grad:
            a._accumulate(np.broadcast_to(out.grad, a.shape).astype(a.dtype))
    out._backward = _bw if out.requires_grad else None
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), None)

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))
    out._backward = _bw if out.requires_grad else None
    return out


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise AutodiffError("concat: %s" % e)
    sizes = [t.shape[axis] for t in tensors]
    out = _make(data, tensors, None)

    def _bw():
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * data.ndim
                idx[axis] = slice(offset, offset + s)
                t._accumulate(out.grad[tuple(idx)])
            offset += s
    out._backward = _bw if out.requires_grad else None
    return out


def avg_pool2(a, factor):
    """Non-overlapping mean pooling over the last two axes."""
    a = as_tensor(a)
    f = int(factor)
    if f == 1:
        return a
    B, C, H, W = a.shape
    if H % f or W % f:
        raise AutodiffError("avg_pool2: %dx%d not divisible by %d" % (H, W, f))
    v = a.data.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))
    out = _make(v.astype(a.dtype), (a,), None)

    def _bw():
        if a.requires_grad:
            g = out.grad[:, :, :, None, :, None] / (f * f)
            g = np.broadcast_to(g, (B, C, H // f, f, W // f, f))
            a._accumulate(g.reshape(a.shape).astype(a.dtype))
    out._backward = _bw if out.requires_grad else None
    return out


def leaky_relu(a, alpha):
    a = as_tensor(a)
    out = _make(_lrelu_np(a.data, alpha), (a,), None)

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * _lrelu_grad_np(a.data, alpha))
    out._backward = _bw if out.requires_grad else None
    return out


def charbonnier(a, eta, r):
    """Robust penalty (x^2 + eta^2)^r, applied elementwise."""
    a = as_tensor(a)
    if not (eta > 0 and 0 < r < 1):
        raise AutodiffError("charbonnier: need eta > 0 and r in (0,1)")
    base = a.data.astype(np.float64) ** 2 + eta * eta
    out = _make((base ** r).astype(a.dtype), (a,), None)

    def _bw():
        if a.requires_grad:
            d = (r * base ** (r - 1.0) * 2.0 * a.data).astype(a.dtype)
            a._accumulate(out.grad * d)
    out._backward = _bw if out.requires_grad else None
    return out


def mask_scale(a, mask):
    """Multiply by a constant 0/1 mask (gradient blocked where mask is 0)."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=a.dtype)
    out = _make(a.data * m, (a,), None)

    def _bw():
        if a.requires_grad:
            a._accumulate(out.grad * m)
    out._backward = _bw if out.requires_grad else None
    return out


def smoothness_sum(flow):
    """Sum of absolute neighbor differences over both channels of a flow map.

    Accepts [2,H,W] or [B,2,H,W]. Boundary pairs with a missing neighbor
    are omitted; the subgradient at exact ties is 0.
    """
    flow = as_tensor(flow)
    f = flow.data
    squeeze = False
    if f.ndim == 3:
        f = f[None]
        squeeze = True
    dh = f[:, :, :-1, :] - f[:, :, 1:, :]
    dw = f[:, :, :, :-1] - f[:, :, :, 1:]
    val = np.abs(dh).sum(dtype=np.float64) + np.abs(dw).sum(dtype=np.float64)
    out = _make(np.asarray(val).astype(flow.dtype).reshape(()), (flow,), None)

    def _bw():
        if flow.requires_grad:
            g = np.zeros_like(f)
            sh = np.sign(dh)
            sw = np.sign(dw)
            g[:, :, :-1, :] += sh
            g[:, :, 1:, :] -= sh
            g[:, :, :, :-1] += sw
            g[:, :, :, 1:] -= sw
            if squeeze:
                g = g[0]
            flow._accumulate((out.grad * g).astype(flow.dtype))
    out._backward = _bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# convolution machinery (im2col / col2im)
# ---------------------------------------------------------------------------

def _out_hw(H, W, k, stride, pad):
    # floor division: trailing rows/columns that do not fit a full window
    # are ignored, as in the standard convolution libraries
    Ho = (H + 2 * pad - k) // stride
    Wo = (W + 2 * pad - k) // stride
    if Ho < 0 or Wo < 0:
        raise AutodiffError("conv: size (%d,%d) incompatible with k=%d s=%d p=%d"
                            % (H, W, k, stride, pad))
    return Ho + 1, Wo + 1


def _im2col(x, k, stride, pad):
    B, C, H, W = x.shape
    Ho, Wo = _out_hw(H, W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (B, C, k, k, Ho, Wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    return np.ascontiguousarray(view).reshape(B, C * k * k, Ho * Wo)


def _col2im(cols, x_shape, k, stride, pad):
    B, C, H, W = x_shape
    Ho, Wo = _out_hw(H, W, k, stride, pad)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(B, C, k, k, Ho, Wo)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += c6[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, b=None, stride=1, padding=0):
    """Standard cross-correlation. x [B,Cin,H,W], w [Cout,Cin,k,k], b [Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    B, Cin, H, W = x.shape
    Cout, Cin_w, k, k2 = w.shape
    if Cin != Cin_w or k != k2:
        raise AutodiffError("conv2d: weight %r does not match input %r"
                            % (w.shape, x.shape))
    Ho, Wo = _out_hw(H, W, k, stride, padding)
    cols = _im2col(x.data, k, stride, padding)
    w2 = w.data.reshape(Cout, Cin * k * k)
    out_data = np.matmul(w2, cols).reshape(B, Cout, Ho, Wo)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_data, parents, None)

    def _bw():
        g2 = out.grad.reshape(B, Cout, Ho * Wo)
        if w.requires_grad:
            gw = np.einsum("bol,bkl->ok", g2, cols, dtype=np.float64)
            w._accumulate(gw.reshape(w.shape).astype(w.dtype))
        if b is not None and b.requires_grad:
            b._accumulate(out.grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            x._accumulate(_col2im(gcols, x.shape, k, stride, padding))
    out._backward = _bw if out.requires_grad else None
    return out


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """Transposed convolution. x [B,Cin,H,W], w [Cin,Cout,k,k], b [Cout].

    Output spatial size is (H-1)*stride - 2*padding + k. With the same
    weight array this is the exact adjoint of :func:`conv2d`.
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    B, Cin, H, W = x.shape
    Cin_w, Cout, k, k2 = w.shape
    if Cin != Cin_w or k != k2:
        raise AutodiffError("conv_transpose2d: weight %r does not match input %r"
                            % (w.shape, x.shape))
    Ho = (H - 1) * stride - 2 * padding + k
    Wo = (W - 1) * stride - 2 * padding + k
    if Ho <= 0 or Wo <= 0:
        raise AutodiffError("conv_transpose2d: non-positive output size")
    w2 = w.data.reshape(Cin, Cout * k * k)
    xf = x.data.reshape(B, Cin, H * W)
    cols = np.matmul(w2.T, xf)                      # [B, Cout*k*k, H*W]
    out_data = _col2im(cols, (B, Cout, Ho, Wo), k, stride, padding)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = _make(out_data, parents, None)

    def _bw():
        gcols = _im2col(out.grad, k, stride, padding)   # [B, Cout*k*k, H*W]
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
            x._accumulate(gx.astype(x.dtype))
        if w.requires_grad:
            gw = np.einsum("bil,bkl->ik", xf, gcols, dtype=np.float64)
            w._accumulate(gw.reshape(w.shape).astype(w.dtype))
        if b is not None and b.requires_grad:
            b._accumulate(out.grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype))
    out._backward = _bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance shared across forward passes."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def state(self):
        return {"mean": self.mean.copy(), "var": self.var.copy()}

    def load(self, state):
        self.mean = np.asarray(state["mean"], dtype=self.mean.dtype)
        self.var = np.asarray(state["var"], dtype=self.var.dtype)


def batch_norm(x, gamma, beta, stats, train, eps=1e-5, momentum=0.1):
    """Channel-wise batch normalization over (B, H, W).

    Train mode normalizes by the batch statistics and updates ``stats``
    in place; eval mode normalizes by the running statistics (their
    initial values are mean 0, var 1, which is valid, not an error).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise AutodiffError("batch_norm: gamma/beta must have shape (%d,)" % C)
    if train:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.astype(np.float64).var(axis=(0, 2, 3))
        stats.mean = ((1 - momentum) * stats.mean + momentum * mean).astype(stats.mean.dtype)
        stats.var = ((1 - momentum) * stats.var + momentum * var).astype(stats.var.dtype)
    else:
        mean = stats.mean.astype(np.float64)
        var = stats.var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]).astype(x.dtype)
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = _make(out_data, (x, gamma, beta), None)
    m = B * H * W

    def _bw():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(gamma.dtype))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if train:
                s1 = gxhat.sum(axis=(0, 2, 3), dtype=np.float64)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
                gx = (gxhat - (s1[None, :, None, None] + xhat * s2[None, :, None, None]) / m)
                gx = gx * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
            x._accumulate(gx.astype(x.dtype))
    out._backward = _bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(image, coords):
    """Sample ``image`` [B,C,H,W] at absolute positions ``coords`` [B,2,H,W].

    coords[:, 0] holds x (column) and coords[:, 1] holds y (row)
    positions. Positions are clamped to the image rectangle before
    interpolation; the coordinate gradient is zero wherever the clamp
    saturates.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    B, C, H, W = image.shape
    if coords.shape != (B, 2, H, W):
        raise AutodiffError("bilinear_sample: coords %r for image %r"
                            % (coords.shape, image.shape))
    cx = np.clip(coords.data[:, 0], 0.0, W - 1.0)
    cy = np.clip(coords.data[:, 1], 0.0, H - 1.0)
    in_x = (coords.data[:, 0] >= 0.0) & (coords.data[:, 0] <= W - 1.0)
    in_y = (coords.data[:, 1] >= 0.0) & (coords.data[:, 1] <= H - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (cx - x0).astype(image.dtype)
    fy = (cy - y0).astype(image.dtype)

    bidx = np.arange(B)[:, None, None]
    img = image.data

    def gather(yy, xx):
        # advanced indices around the channel slice put C last: [B,H,W,C]
        return np.moveaxis(img[bidx, :, yy, xx], -1, 1)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    wx, wy = fx[:, None], fy[:, None]
    out_data = ((1 - wy) * ((1 - wx) * v00 + wx * v01)
                + wy * ((1 - wx) * v10 + wx * v11)).astype(image.dtype)
    out = _make(out_data, (image, coords), None)

    def _bw():
        g = out.grad
        if image.requires_grad:
            gimg = np.zeros_like(img)
            for vals, yy, xx in (((1 - wy) * (1 - wx), y0, x0),
                                 ((1 - wy) * wx, y0, x1),
                                 (wy * (1 - wx), y1, x0),
                                 (wy * wx, y1, x1)):
                contrib = np.moveaxis(g * vals, 1, -1)      # [B, H, W, C]
                np.add.at(gimg, (bidx, slice(None), yy, xx), contrib)
            image._accumulate(gimg.astype(image.dtype))
        if coords.requires_grad:
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
            dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
            gx = (g * dx).sum(axis=1) * in_x
            gy = (g * dy).sum(axis=1) * in_y
            coords._accumulate(np.stack([gx, gy], axis=1).astype(coords.dtype))
    out._backward = _bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# spiking node
# ---------------------------------------------------------------------------

def sif_node(v, cfg):
    """Signed threshold firing on a post-integration potential tensor.

    Forward emits {-1, 0, +1} spikes; backward multiplies the upstream
    gradient by the surrogate factor (1/v_th on the crossed side, 0
    elsewhere). This is the only node whose backward is not the true
    derivative of its forward.
    """
    v = as_tensor(v)
    spikes = sif_fire(v.data, cfg).astype(v.dtype)
    out = _make(spikes, (v,), None)

    def _bw():
        if v.requires_grad:
            v._accumulate(out.grad * sif_surrogate(v.data, cfg).astype(v.dtype))
    out._backward = _bw if out.requires_grad else None
    return out


def if_node(v, v_th_pos):
    """Binary threshold firing (positive threshold only, ablation model)."""
    v = as_tensor(v)
    spikes = (v.data > v_th_pos).astype(v.dtype)
    out = _make(spikes, (v,), None)

    def _bw():
        if v.requires_grad:
            g = np.where(v.data > v_th_pos, 1.0 / v_th_pos, 0.0).astype(v.dtype)
            v._accumulate(out.grad * g)
    out._backward = _bw if out.requires_grad else None
    return out
