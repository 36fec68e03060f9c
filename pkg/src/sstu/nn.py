"""Dense CHW tensor primitives with reverse-mode differentiation.

Images, feature maps and masks are plain numpy arrays shaped
(channels, height, width), float32 in the production path.  Every
primitive is a pure function of its inputs; passing a ``GradTape``
records the op so a later reverse pass can hand back gradients for
any input or parameter array that participated in the forward pass.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
# sigmoid outputs are pinned inside the open interval so downstream
# log-losses never see exact 0/1
SIGMOID_CLAMP = 1e-7


def _check_chw(x, op):
    if x.ndim != 3:
        raise ValueError(f"{op}: expected a (channels, height, width) array, got shape {x.shape}")


class PatternTrace:
    """Recorded relu masks and pool argmax choices, for linearized replay.

    Finite-difference gradient probes must evaluate the same smooth branch
    of the piecewise forward function that the analytic gradient belongs
    to; replaying a trace pins the relu/pool decisions while everything
    else responds to the perturbation.  Not thread safe.
    """

    def __init__(self):
        self._items = []
        self._cursor = 0

    def push(self, item):
        self._items.append(item)

    def next(self):
        item = self._items[self._cursor]
        self._cursor += 1
        return item

    def rewind(self):
        self._cursor = 0


_PATTERN_MODE = None  # None | ("record", trace) | ("replay", trace)


@contextmanager
def record_patterns(trace: PatternTrace):
    global _PATTERN_MODE
    _PATTERN_MODE = ("record", trace)
    try:
        yield trace
    finally:
        _PATTERN_MODE = None


@contextmanager
def replay_patterns(trace: PatternTrace):
    global _PATTERN_MODE
    trace.rewind()
    _PATTERN_MODE = ("replay", trace)
    try:
        yield trace
    finally:
        _PATTERN_MODE = None


class GradTape:
    """Execution-ordered record of primitives for one forward pass.

    Single-owner: one forward recording followed by one (or more)
    ``backward`` calls.  Gradients are queried per array object via
    ``grad``; arrays not on the differentiated path return None.
    """

    def __init__(self):
        self._records = []  # (out_id, input arrays, backward_fn)
        self._keepalive = []  # inputs/outputs must outlive the tape
        self._grads = None

    def record(self, output, inputs, backward_fn):
        """backward_fn(grad_out) -> per-input gradients (None entries allowed)."""
        self._keepalive.append(output)
        self._keepalive.extend(inputs)
        self._records.append((id(output), tuple(id(a) for a in inputs), backward_fn))

    def backward(self, seed_grad, wrt=None):
        """Run the reverse pass seeding ``seed_grad`` at ``wrt``.

        ``wrt`` defaults to the output of the last recorded primitive.
        Records downstream of the seed point contribute nothing.
        """
        if not self._records:
            raise RuntimeError("backward before forward: the tape has no recorded ops")
        target = self._records[-1][0] if wrt is None else id(wrt)
        seed_grad = np.asarray(seed_grad)
        grads: dict[int, np.ndarray] = {target: seed_grad}
        for out_id, in_ids, backward_fn in reversed(self._records):
            g_out = grads.get(out_id)
            if g_out is None:
                continue
            for in_id, g in zip(in_ids, backward_fn(g_out)):
                if g is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = g if acc is None else acc + g
        self._grads = grads

    def grad(self, array):
        """Gradient accumulated for ``array`` by the last backward pass."""
        if self._grads is None:
            raise RuntimeError("backward has not been run on this tape")
        return self._grads.get(id(array))


# ---------------------------------------------------------------- conv 3x3

def _im2col3(x):
    # zero padding of 1 keeps the spatial size; column layout (C*9, H*W)
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1] = x
    col = np.empty((c, 9, h, w), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            col[:, k] = xp[:, dy:dy + h, dx:dx + w]
            k += 1
    return col.reshape(c * 9, h * w)


def _col2im3(col, shape):
    c, h, w = shape
    col = col.reshape(c, 9, h, w)
    xp = np.zeros((c, h + 2, w + 2), dtype=col.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + h, dx:dx + w] += col[:, k]
            k += 1
    return xp[:, 1:h + 1, 1:w + 1]


def conv3x3(x, w, b, tape=None):
    """Same-size 3x3 convolution with zero padding of 1.

    x: (Cin, H, W), w: (Cout, Cin, 3, 3), b: (Cout,).
    """
    _check_chw(x, "conv3x3")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv3x3: weights must be (Cout, Cin, 3, 3), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv3x3: weights expect {w.shape[1]} input channels, input has {x.shape[0]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"conv3x3: bias shape {b.shape} does not match {w.shape[0]} filters")
    cout = w.shape[0]
    _, h, wd = x.shape
    col = _im2col3(x)
    out = (w.reshape(cout, -1) @ col).reshape(cout, h, wd) + b[:, None, None]
    if tape is not None:
        def backward_fn(g):
            gf = g.reshape(cout, -1)
            gw = (gf @ col.T).reshape(w.shape)
            gb = g.sum(axis=(1, 2))
            gx = _col2im3(w.reshape(cout, -1).T @ gf, x.shape)
            return gx, gw, gb
        tape.record(out, (x, w, b), backward_fn)
    return out


def conv1x1(x, w, b, tape=None):
    """Per-pixel linear map across channels. w: (Cout, Cin, 1, 1)."""
    _check_chw(x, "conv1x1")
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ValueError(f"conv1x1: weights must be (Cout, Cin, 1, 1), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv1x1: weights expect {w.shape[1]} input channels, input has {x.shape[0]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"conv1x1: bias shape {b.shape} does not match {w.shape[0]} filters")
    w2 = w[:, :, 0, 0]
    out = np.tensordot(w2, x, axes=(1, 0)) + b[:, None, None]
    if tape is not None:
        def backward_fn(g):
            gw = np.tensordot(g, x, axes=((1, 2), (1, 2))).reshape(w.shape)
            gb = g.sum(axis=(1, 2))
            gx = np.tensordot(w2.T, g, axes=(1, 0))
            return gx, gw, gb
        tape.record(out, (x, w, b), backward_fn)
    return out


# ------------------------------------------------------------- batch norm

def batch_norm(x, gamma, beta, running_mean, running_var, eps=BN_EPS,
               mode="infer", momentum=BN_MOMENTUM, update_running=True,
               tape=None):
    """Per-channel normalization over the spatial axes.

    infer mode normalizes with the running statistics; train mode uses
    the statistics of this sample and (optionally) folds them into the
    running buffers in place: run = momentum*run + (1-momentum)*new.
    """
    _check_chw(x, "batch_norm")
    c = x.shape[0]
    for name, v in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ValueError(f"batch_norm: {name} shape {v.shape} does not match {c} channels")
    if np.any(running_var < 0):
        raise ValueError("batch_norm: running_var has negative entries")
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")

    if mode == "infer":
        istd = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[:, None, None]) * istd[:, None, None]
        out = gamma[:, None, None] * xhat + beta[:, None, None]
        if tape is not None:
            def backward_fn(g):
                gg = (g * xhat).sum(axis=(1, 2))
                gb = g.sum(axis=(1, 2))
                gx = g * (gamma * istd)[:, None, None]
                return gx, gg, gb
            tape.record(out, (x, gamma, beta), backward_fn)
        return out

    m = x.mean(axis=(1, 2))
    v = x.var(axis=(1, 2))
    istd = 1.0 / np.sqrt(v + eps)
    xc = x - m[:, None, None]
    xhat = xc * istd[:, None, None]
    out = gamma[:, None, None] * xhat + beta[:, None, None]
    if update_running:
        running_mean *= momentum
        running_mean += (1.0 - momentum) * m
        running_var *= momentum
        running_var += (1.0 - momentum) * v
    if tape is not None:
        n = x.shape[1] * x.shape[2]

        def backward_fn(g):
            gg = (g * xhat).sum(axis=(1, 2))
            gb = g.sum(axis=(1, 2))
            dxhat = g * gamma[:, None, None]
            dvar = (dxhat * xc).sum(axis=(1, 2)) * (-0.5) * istd ** 3
            dmean = (-(dxhat.sum(axis=(1, 2)) * istd)
                     + dvar * (-2.0 / n) * xc.sum(axis=(1, 2)))
            gx = (dxhat * istd[:, None, None]
                  + (2.0 / n) * dvar[:, None, None] * xc
                  + dmean[:, None, None] / n)
            return gx, gg, gb
        tape.record(out, (x, gamma, beta), backward_fn)
    return out


# ------------------------------------------------------------ activations

def relu(x, tape=None):
    if _PATTERN_MODE is None:
        mask = x > 0
    elif _PATTERN_MODE[0] == "record":
        mask = x > 0
        _PATTERN_MODE[1].push(mask)
    else:
        mask = _PATTERN_MODE[1].next()
    out = np.where(mask, x, 0)
    if tape is not None:
        def backward_fn(g):
            return (g * mask,)
        tape.record(out, (x,), backward_fn)
    return out


def sigmoid(x, tape=None):
    """Numerically stable logistic, clamped just inside (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = np.clip(out, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    if tape is not None:
        def backward_fn(g):
            return (g * out * (1.0 - out),)
        tape.record(out, (x,), backward_fn)
    return out


# ----------------------------------------------------------- pool/upsample

def maxpool2(x, tape=None):
    """2x2 max pooling, stride 2.  Requires even spatial dims.

    Argmax ties resolve to the first element in row-major window order
    so the backward routing is deterministic.
    """
    _check_chw(x, "maxpool2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    if _PATTERN_MODE is None:
        idx = win.argmax(axis=-1)
    elif _PATTERN_MODE[0] == "record":
        idx = win.argmax(axis=-1)
        _PATTERN_MODE[1].push(idx)
    else:
        idx = _PATTERN_MODE[1].next()
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if tape is not None:
        def backward_fn(g):
            buf = np.zeros((c, ho, wo, 4), dtype=g.dtype)
            np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
            gx = buf.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
            return (gx,)
        tape.record(out, (x,), backward_fn)
    return out


def upsample_tconv2(x, w, b, tape=None):
    """Transposed convolution, kernel 2x2, stride 2, no padding.

    x: (Cin, H, W), w: (Cin, Cout, 2, 2), b: (Cout,) -> (Cout, 2H, 2W).
    Each input pixel scatters a weighted 2x2 block.
    """
    _check_chw(x, "upsample_tconv2")
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ValueError(f"upsample_tconv2: weights must be (Cin, Cout, 2, 2), got {w.shape}")
    if w.shape[0] != x.shape[0]:
        raise ValueError(
            f"upsample_tconv2: weights expect {w.shape[0]} input channels, input has {x.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"upsample_tconv2: bias shape {b.shape} does not match {w.shape[1]} filters")
    cin, h, wd = x.shape
    cout = w.shape[1]
    out = np.einsum("kij,kodc->oidjc", x, w, optimize=True).reshape(cout, 2 * h, 2 * wd)
    out += b[:, None, None]
    if tape is not None:
        def backward_fn(g):
            gv = g.reshape(cout, h, 2, wd, 2)
            gx = np.einsum("oidjc,kodc->kij", gv, w, optimize=True)
            gw = np.einsum("kij,oidjc->kodc", x, gv, optimize=True)
            gb = g.sum(axis=(1, 2))
            return gx, gw, gb
        tape.record(out, (x, w, b), backward_fn)
    return out


def concat_channels(a, b, tape=None):
    """Stack b's channels after a's. Spatial dims must agree."""
    _check_chw(a, "concat_channels")
    _check_chw(b, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(
            f"concat_channels: spatial dims differ, {a.shape[1:]} vs {b.shape[1:]}")
    out = np.concatenate([a, b], axis=0)
    if tape is not None:
        ca = a.shape[0]

        def backward_fn(g):
            return g[:ca], g[ca:]
        tape.record(out, (a, b), backward_fn)
    return out
