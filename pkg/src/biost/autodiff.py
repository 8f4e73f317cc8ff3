"""Minimal reverse-mode autodiff on numpy arrays.

Provides exactly the primitives the translation networks and losses need:
conv2d / conv_transpose2d (im2col + GEMM), batch norm, relu/tanh, L1 and
unit-Gaussian penalties, a linear head and cross-entropy for the eval
classifier, plus a central finite-difference gradient checker.

Parameters live in named ParamGroups. A frozen group never accumulates
parameter gradients during backward, but gradients still flow through its
operations to upstream nodes. That distinction (freeze, not stop-gradient)
is what the cycle losses rely on.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its contract (e.g. backward on a non-scalar)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus optional gradient and graph-recording hooks.

    Graph nodes are implicit: each op result keeps references to its
    parent tensors and a closure that pushes gradients to them. Data is
    treated as immutable once it has been used in a forward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_op", "_owners")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # contiguity lets gradient_check perturb coordinates through a flat view
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._backward = None
        self._op = None
        self._owners = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same data with no graph history."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._prev = ()
        out._backward = None
        out._op = None
        out._owners = ()
        return out

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, op_name, backward_fn):
    """Wrap an op output, recording the node only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
        out._op = op_name
    return out


def _is_frozen(t):
    return bool(t._owners) and all(g.frozen for g in t._owners)


def _accum(t, g):
    """Accumulate gradient into a tensor, honoring group freezing."""
    if not t.requires_grad or _is_frozen(t):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class ParamGroup:
    """Named map of learnable tensors plus non-learnable buffers.

    ``frozen`` blocks gradient accumulation into the group's parameters
    while leaving gradient flow through its ops untouched. Buffers hold
    state like batch-norm running stats and are never gradient-tracked.
    """

    def __init__(self, name=""):
        self.name = name
        self.params = {}
        self.buffers = {}
        self.frozen = False

    def add(self, name, array, dtype=np.float32):
        t = Tensor(np.asarray(array), requires_grad=True, dtype=dtype)
        t._owners = (self,)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def add_buffer(self, name, array, dtype=np.float32):
        buf = np.asarray(array).astype(dtype)
        self.buffers[name] = buf
        return buf

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def max_abs_grad(self):
        out = 0.0
        for t in self.params.values():
            if t.grad is not None and t.grad.size:
                out = max(out, float(np.max(np.abs(t.grad))))
        return out

    def clone(self, name=None):
        """Deep copy: fresh tensors and buffers, no sharing with the source."""
        dup = ParamGroup(name if name is not None else self.name)
        for k, t in self.params.items():
            dup.add(k, t.data.copy(), dtype=t.data.dtype)
        for k, b in self.buffers.items():
            dup.buffers[k] = b.copy()
        return dup


@contextlib.contextmanager
def frozen(*groups):
    """Temporarily freeze the given ParamGroups (used per loss term)."""
    prev = [g.frozen for g in groups]
    for g in groups:
        g.frozen = True
    try:
        yield
    finally:
        for g, p in zip(groups, prev):
            g.frozen = p


def backward(loss, seed=1.0, retain_graph=False):
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``grad`` of every reachable tensor that requires
    gradients and is not owned by a frozen group. The recorded graph is
    released afterwards unless ``retain_graph`` is set.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))

    loss.grad = np.asarray(seed, dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not retain_graph:
            node._prev = ()
            node._backward = None
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} vs {b.data.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), "add", back)


def scale(a, c):
    c = float(c)

    def back(g):
        _accum(a, g * c)

    return _result(a.data * c, (a,), "scale", back)


def relu(a):
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0), (a,), "relu", back)


def tanh(a):
    y = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - y * y))

    return _result(y, (a,), "tanh", back)


# ---------------------------------------------------------------------------
# losses


def l1_loss(a, b):
    """Mean absolute difference over all elements (scalar output)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"l1_loss: shapes {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        s = np.sign(diff) * (g / n)
        _accum(a, s.astype(a.data.dtype))
        _accum(b, (-s).astype(b.data.dtype))

    return _result(np.abs(diff).mean(), (a, b), "l1_loss", back)


def kl_unit_gaussian(mu):
    """0.5 * mean(mu^2): KL of N(mu, I) from N(0, I) per coordinate, up to constants."""
    n = mu.data.size

    def back(g):
        _accum(mu, (mu.data * (g / n)).astype(mu.data.dtype))

    return _result(0.5 * np.mean(mu.data * mu.data), (mu,), "kl_unit_gaussian", back)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.data
    n = z.shape[0]
    labels = np.asarray(labels)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sumez = ez.sum(axis=1, keepdims=True)
    sm = ez / sumez
    log_sm = (z - zmax) - np.log(sumez)
    nll = -log_sm[np.arange(n), labels].mean()

    def back(g):
        d = sm.copy()
        d[np.arange(n), labels] -= 1.0
        _accum(logits, (d * (g / n)).astype(z.dtype))

    return _result(np.asarray(nll, dtype=z.dtype).reshape(()), (logits,), "cross_entropy", back)


# ---------------------------------------------------------------------------
# convolution via im2col + GEMM
#
# Column layout is channel-major [C, kh, kw, N, Ho, Wo] so forward and both
# backward GEMMs are single large matmuls over all batch positions.


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride].transpose(1, 0, 2, 3)
    return cols


def _col2im(cols, n, c, hp, wp, stride):
    kh, kw, ho, wo = cols.shape[1], cols.shape[2], cols.shape[4], cols.shape[5]
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return xp


def _as_batch(x):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected rank 3 or 4 input, got shape {x.data.shape}")


def conv2d(x, w, b, stride=1, padding=0):
    """2-D convolution (cross-correlation), zero padding.

    x: [C,H,W] or [N,C,H,W]; w: [K,C,kh,kw]; b: [K].
    Output spatial size: floor((H + 2*padding - kh) / stride) + 1.

    Two lowerings: im2col + one GEMM (general case), or per-tap GEMMs with
    shifted accumulation when stride is 1 and the output is much narrower
    than the column matrix would be (e.g. the final to-image conv). Both
    compute the same sums; only the float accumulation order differs.
    """
    xd, squeeze = _as_batch(x)
    n, c, h, wdt = xd.shape
    k, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels (axis 1) but weights expect {cw}")
    if h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * padding}x{wdt + 2 * padding} smaller than kernel {kh}x{kw}")
    if b.data.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape}, expected ({k},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1

    if stride == 1 and k < c and padding < kh and padding < kw:
        out, back_nb = _conv2d_taps(x, w, b, xd, padding, ho, wo, squeeze)
    else:
        out, back_nb = _conv2d_im2col(x, w, b, xd, stride, padding, ho, wo, squeeze)

    def back(g):
        back_nb(g[None] if squeeze else g)

    return _result(out[0] if squeeze else out, (x, w, b), "conv2d", back)


def _conv2d_im2col(x, w, b, xd, stride, padding, ho, wo, squeeze):
    n, c, h, wdt = xd.shape
    k, _, kh, kw = w.data.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(k, c * kh * kw)
    out = w2 @ cols.reshape(c * kh * kw, n * ho * wo)
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    out += b.data[None, :, None, None]

    def back(g):
        gm = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        if w.requires_grad:
            _accum(w, (gm @ cols.reshape(c * kh * kw, -1).T).reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (w2.T @ gm).reshape(c, kh, kw, n, ho, wo)
            dxp = _col2im(dcols, n, c, xp.shape[2], xp.shape[3], stride)
            dx = dxp[:, :, padding : padding + h, padding : padding + wdt] if padding else dxp
            _accum(x, dx[0] if squeeze else dx)

    return out, back


def _conv2d_taps(x, w, b, xd, padding, ho, wo, squeeze):
    # stride-1, few output channels: one GEMM over all taps, then a cheap
    # K-channel col2im scatter instead of a C*kh*kw-wide column matrix
    n, c, h, wdt = xd.shape
    k, _, kh, kw = w.data.shape
    p = padding
    x2 = xd.transpose(1, 0, 2, 3).reshape(c, n * h * wdt)
    wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1)).reshape(k * kh * kw, c)
    z = (wflip @ x2).reshape(k, kh, kw, n, h, wdt)
    outp = _col2im(z, n, k, h + kh - 1, wdt + kw - 1, 1)
    out = outp[:, :, kh - 1 - p : kh - 1 - p + ho, kw - 1 - p : kw - 1 - p + wo]
    out = out + b.data[None, :, None, None]

    def back(g):
        # lower the input/weight gradients onto columns of the (small-channel)
        # upstream gradient: both are stride-1 convs against flipped taps
        hp, wp = h + 2 * p, wdt + 2 * p
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gcols = _im2col(gp, kh, kw, 1, hp, wp).reshape(k * kh * kw, n * hp * wp)
        if x.requires_grad:
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, k * kh * kw)
            dxp = (wflip @ gcols).reshape(c, n, hp, wp)
            dx = dxp[:, :, p : p + h, p : p + wdt].transpose(1, 0, 2, 3)
            dx = np.ascontiguousarray(dx)
            _accum(x, dx[0] if squeeze else dx)
        if w.requires_grad:
            xp2 = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
            xp2 = xp2.transpose(1, 0, 2, 3).reshape(c, n * hp * wp)
            m = (xp2 @ gcols.T).reshape(c, k, kh, kw)
            _accum(w, np.ascontiguousarray(m[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return out, back


def conv_transpose2d(x, w, b, stride=1, padding=0):
    """Transposed convolution, the adjoint of conv2d under the same weights.

    x: [C,H,W] or [N,C,H,W]; w: [C,K,kh,kw] (input-major); b: [K].
    Output spatial size: (H - 1)*stride - 2*padding + kh.
    """
    xd, squeeze = _as_batch(x)
    n, c, h, wdt = xd.shape
    cw, k, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels (axis 1) but weights expect {cw}")
    if b.data.shape != (k,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.data.shape}, expected ({k},)")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wdt - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size {ho}x{wo}")

    w2 = w.data.reshape(c, k * kh * kw)
    xm = xd.transpose(1, 0, 2, 3).reshape(c, n * h * wdt)
    cols = (w2.T @ xm).reshape(k, kh, kw, n, h, wdt)
    outp = _col2im(cols, n, k, ho + 2 * padding, wo + 2 * padding, stride)
    out = outp[:, :, padding : padding + ho, padding : padding + wo] if padding else outp
    out = out + b.data[None, :, None, None]

    def back(g):
        if squeeze:
            g = g[None]
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        dcols = _im2col(gp, kh, kw, stride, h, wdt).reshape(k * kh * kw, n * h * wdt)
        if x.requires_grad:
            dx = (w2 @ dcols).reshape(c, n, h, wdt).transpose(1, 0, 2, 3)
            _accum(x, dx[0] if squeeze else dx)
        if w.requires_grad:
            _accum(w, (xm @ dcols.T).reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _result(out[0] if squeeze else out, (x, w, b), "conv_transpose2d", back)


# ---------------------------------------------------------------------------
# batch norm


def batch_norm(x, gamma, beta, mode, running_mean, running_var, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over [N,C,H,W].

    Train mode normalizes by batch statistics (differentiable through them)
    and updates the running buffers in place with the given momentum. Eval
    mode normalizes by the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects rank-4 input, got shape {x.data.shape}")
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm: unknown mode {mode!r}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")

    if mode == "train":
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
        m = None

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        gsum = g.sum(axis=(0, 2, 3))
        gx = (g * xhat).sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            _accum(gamma, gx.astype(gamma.data.dtype))
        if beta.requires_grad:
            _accum(beta, gsum.astype(beta.data.dtype))
        if x.requires_grad:
            gi = (gamma.data * inv)[None, :, None, None]
            if mode == "train":
                dx = gi * (g - gsum[None, :, None, None] / m - xhat * gx[None, :, None, None] / m)
            else:
                dx = gi * g
            _accum(x, dx.astype(x.data.dtype))

    return _result(y.astype(x.data.dtype), (x, gamma, beta), "batch_norm", back)


# ---------------------------------------------------------------------------
# classifier head ops


def linear(x, w, b):
    """x: [N,F] @ w: [O,F] transposed, plus bias [O]."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: input {x.data.shape} vs weights {w.data.shape}")
    y = x.data @ w.data.T + b.data

    def back(g):
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            _accum(w, g.T @ x.data)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _result(y, (x, w, b), "linear", back)


def global_avg_pool(x):
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank-4 input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    y = x.data.mean(axis=(2, 3))

    def back(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(x.data.dtype))

    return _result(y, (x,), "global_avg_pool", back)


# ---------------------------------------------------------------------------
# finite-difference oracle


def gradient_check(fn, inputs, epsilon=1e-4, floor=1e-8):
    """Worst relative error of analytic vs central-difference gradients.

    ``fn`` maps the input Tensors to a scalar Tensor. Inputs to be checked
    must be float64 and require gradients. Returns max over all coordinates
    of |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ContractError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    checked = [t for t in inputs if t.requires_grad]
    for t in checked:
        if t.data.dtype != np.float64:
            raise ContractError("gradient_check requires float64 inputs")
        t.zero_grad()

    out = fn(*inputs)
    backward(out)
    analytic = [t.grad.copy() for t in checked]

    worst = 0.0
    with no_grad():
        for t, ana in zip(checked, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(fn(*inputs).data)
                flat[i] = orig - epsilon
                fm = float(fn(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * epsilon)
                a = ana.reshape(-1)[i]
                rel = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, rel)
    return worst
