"""Differentiable primitives.

Every public function takes Tensors, computes the forward value with numpy
and records a node whose backward rule is registered below it. Binary
elementwise ops accept either two tensors of identical dims or a tensor and
a Python scalar; there is no general broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from smanet.tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    backward_rule,
    record,
)


def _is_scalar(v) -> bool:
    return isinstance(v, (int, float, np.floating, np.integer))


def _same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return record("add_scalar", (a,), a.data + b)
    _same_dims(a, b, "add")
    return record("add", (a, b), a.data + b.data)


@backward_rule("add")
def _add_bw(node, g):
    return g, g


@backward_rule("add_scalar")
def _add_scalar_bw(node, g):
    return (g,)


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    _same_dims(a, b, "sub")
    return record("sub", (a, b), a.data - b.data)


@backward_rule("sub")
def _sub_bw(node, g):
    return g, -g


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return record("mul_scalar", (a,), a.data * b, k=b)
    _same_dims(a, b, "mul")
    return record("mul", (a, b), a.data * b.data)


@backward_rule("mul")
def _mul_bw(node, g):
    a, b = node.inputs
    return g * b.data, g * a.data


@backward_rule("mul_scalar")
def _mul_scalar_bw(node, g):
    return (g * node.saved["k"],)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype), mask=mask)


@backward_rule("relu")
def _relu_bw(node, g):
    # subgradient 0 at the kink
    return (g * node.saved["mask"],)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    return record("sigmoid", (x,), _sigmoid(x.data))


@backward_rule("sigmoid")
def _sigmoid_bw(node, g):
    s = node.out.data
    return (g * s * (1 - s),)


def tanh(x: Tensor) -> Tensor:
    return record("tanh", (x,), np.tanh(x.data))


@backward_rule("tanh")
def _tanh_bw(node, g):
    t = node.out.data
    return (g * (1 - t * t),)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record("sum", (x,), np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))


@backward_rule("sum")
def _sum_bw(node, g):
    (x,) = node.inputs
    return (np.full_like(x.data, g),)


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.size)


def add_n(tensors) -> Tensor:
    """Sum of a list of same-dims tensors as a single node."""
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _same_dims(tensors[0], t, "add_n")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data
    return record("add_n", tensors, out)


@backward_rule("add_n")
def _add_n_bw(node, g):
    return tuple(g for _ in node.inputs)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,*spatial] -> [N,C] per-channel spatial mean."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects [N,C,...], got {x.dims}")
    axes = tuple(range(2, x.ndim))
    out = x.data.mean(axis=axes, dtype=np.float64).astype(x.data.dtype)
    return record("gap", (x,), out)


@backward_rule("gap")
def _gap_bw(node, g):
    (x,) = node.inputs
    spatial = x.dims[2:]
    count = int(np.prod(spatial))
    shaped = g.reshape(g.shape + (1,) * len(spatial)) / count
    return (np.broadcast_to(shaped, x.dims).astype(x.data.dtype),)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, dims) -> Tensor:
    return record("reshape", (x,), x.data.reshape(dims))


@backward_rule("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.inputs[0].dims),)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)), axes=axes)


@backward_rule("transpose")
def _transpose_bw(node, g):
    return (g.transpose(np.argsort(node.saved["axes"])),)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.dims[axis] for t in tensors]
    return record("concat", tensors, out, axis=axis, bounds=np.cumsum(sizes)[:-1])


@backward_rule("concat")
def _concat_bw(node, g):
    return tuple(np.split(g, node.saved["bounds"], axis=node.saved["axis"]))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _same_dims(tensors[0], t, "stack")
    return record("stack", tensors, np.stack([t.data for t in tensors], axis=axis), axis=axis)


@backward_rule("stack")
def _stack_bw(node, g):
    axis = node.saved["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(node.inputs)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.dims[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.dims}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    return record("slice", (x,), np.ascontiguousarray(x.data[idx]), idx=idx)


@backward_rule("slice")
def _slice_bw(node, g):
    (x,) = node.inputs
    full = np.zeros_like(x.data, dtype=g.dtype)
    full[node.saved["idx"]] = g
    return (full,)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one index along ``axis`` and drop that axis."""
    part = slice_axis(x, axis, index, index + 1)
    dims = x.dims[:axis] + x.dims[axis + 1:]
    return reshape(part, dims)


def channel_scale(u: Tensor, s: Tensor) -> Tensor:
    """Scale each channel of u[N,C,...] by s[N,C]."""
    if u.dims[:2] != s.dims or s.ndim != 2:
        raise ShapeError(f"channel_scale: scale dims {s.dims} do not match {u.dims[:2]}")
    expand = s.data.reshape(s.dims + (1,) * (u.ndim - 2))
    return record("channel_scale", (u, s), u.data * expand)


@backward_rule("channel_scale")
def _channel_scale_bw(node, g):
    u, s = node.inputs
    expand = s.data.reshape(s.dims + (1,) * (u.ndim - 2))
    gs = (g * u.data).sum(axis=tuple(range(2, u.ndim)), dtype=np.float64)
    return g * expand, gs.astype(g.dtype)


# ---------------------------------------------------------------- dense

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x[N,Fin] -> [N,Fout] with weight[Fout,Fin]."""
    if x.ndim != 2 or weight.ndim != 2 or x.dims[1] != weight.dims[1]:
        raise ShapeError(f"linear: input {x.dims} incompatible with weight {weight.dims}")
    out = x.data @ weight.data.T
    if bias is None:
        return record("linear", (x, weight), out)
    if bias.dims != (weight.dims[0],):
        raise ShapeError(f"linear: bias {bias.dims} does not match {weight.dims[0]} outputs")
    return record("linear", (x, weight, bias), out + bias.data)


fully_connected = linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain [N,K] @ [K,M] product."""
    if a.ndim != 2 or b.ndim != 2 or a.dims[1] != b.dims[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.dims} and {b.dims} disagree")
    return linear(a, transpose(b, (1, 0)))


@backward_rule("linear")
def _linear_bw(node, g):
    x, w = node.inputs[:2]
    gx = g @ w.data
    gw = g.T @ x.data
    if len(node.inputs) == 2:
        return gx, gw
    return gx, gw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)


# ---------------------------------------------------------------- convolution

@dataclass(frozen=True)
class ConvSpec:
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.groups < 1 or self.padding < 0:
            raise ConfigError(f"invalid convolution spec {self}")

    def out_size(self, n: int, k: int) -> int:
        return (n + 2 * self.padding - self.dilation * (k - 1) - 1) // self.stride + 1


def _windows(xp: np.ndarray, groups: int, kh: int, kw: int, ho: int, wo: int, stride, dilation):
    """Strided view [N,G,Cg,kh,kw,Ho,Wo] over a padded input."""
    n, c, _, _ = xp.shape
    xg = xp.reshape(n, groups, c // groups, xp.shape[2], xp.shape[3])
    s = xg.strides
    return as_strided(
        xg,
        shape=(n, groups, c // groups, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2], s[3] * dilation[0], s[4] * dilation[1],
                 s[3] * stride[0], s[4] * stride[1]),
        writeable=False,
    )


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    return xp


def _tap(arr: np.ndarray, a: int, c: int, ho: int, wo: int, stride, dilation):
    """View of the padded input seen by kernel tap (a, c)."""
    r0, c0 = a * dilation[0], c * dilation[1]
    return arr[..., r0:r0 + stride[0] * (ho - 1) + 1:stride[0], c0:c0 + stride[1] * (wo - 1) + 1:stride[1]]


def _conv_forward(x, w, b, stride, padding, dilation, groups):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    ho = (h + 2 * padding[0] - dilation[0] * (kh - 1) - 1) // stride[0] + 1
    wo = (wd + 2 * padding[1] - dilation[1] * (kw - 1) - 1) // stride[1] + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"convolution yields empty output ({ho}x{wo}) for input {h}x{wd}")
    dtype = np.result_type(x, w)
    xp = _pad(x, *padding)
    og = cout // groups
    if cg == 1 and og == 1:
        # depthwise: per-channel multiply-accumulate over kernel taps
        out = np.zeros((n, cout, ho, wo), dtype=dtype)
        for a in range(kh):
            for c in range(kw):
                out += _tap(xp, a, c, ho, wo, stride, dilation) * w[:, 0, a, c].reshape(1, -1, 1, 1)
        cols = xp
        mats = None
    else:
        cols = _windows(xp, groups, kh, kw, ho, wo, stride, dilation)
        wg = w.reshape(groups, og, cg, kh, kw)
        mats = np.ascontiguousarray(cols.transpose(1, 0, 5, 6, 2, 3, 4)).reshape(groups, n * ho * wo, cg * kh * kw)
        out = np.matmul(mats, wg.reshape(groups, og, -1).transpose(0, 2, 1))  # G, NHW, Og
        out = out.reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, cout, ho, wo)
        out = np.ascontiguousarray(out, dtype=dtype)
    if b is not None:
        out += b.reshape(1, cout, 1, 1)
    return out, cols, mats, (ho, wo)


def _conv_backward(g, x, w, cols, mats, stride, padding, dilation, groups):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    og = cout // groups
    _, _, ho, wo = g.shape
    hp, wp = h + 2 * padding[0], wd + 2 * padding[1]
    if mats is None:
        xp = cols
        gw = np.zeros(w.shape, dtype=np.float64)
        gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
        for a in range(kh):
            for c in range(kw):
                patch = _tap(xp, a, c, ho, wo, stride, dilation)
                gw[:, 0, a, c] = np.einsum("nchw,nchw->c", patch, g)
                _tap(gxp, a, c, ho, wo, stride, dilation)[...] += g * w[:, 0, a, c].reshape(1, -1, 1, 1)
    else:
        wg = w.reshape(groups, og, cg, kh, kw)
        gg = g.reshape(n, groups, og, ho, wo)
        gmat = gg.transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)
        gw = np.matmul(gmat.transpose(0, 2, 1), mats).reshape(w.shape)
        gcols = np.matmul(gmat, wg.reshape(groups, og, -1))  # G, NHW, Cg*kh*kw
        gcols = gcols.reshape(groups, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 5, 6, 2, 3)
        gxp = np.zeros((n, groups, cg, hp, wp), dtype=g.dtype)
        for a in range(kh):
            for c in range(kw):
                _tap(gxp, a, c, ho, wo, stride, dilation)[...] += gcols[:, :, :, a, c]
        gxp = gxp.reshape(n, cin, hp, wp)
    gx = gxp[:, :, padding[0]:padding[0] + h, padding[1]:padding[1] + wd]
    return np.ascontiguousarray(gx), gw.astype(g.dtype, copy=False)


def _check_conv_operands(x, weight, bias, groups, nd):
    if x.ndim != nd + 2 or weight.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d expects rank-{nd + 2} input and weight, got {x.dims} and {weight.dims}")
    cin, cout = x.dims[1], weight.dims[0]
    if cin % groups or cout % groups:
        raise ShapeError(f"conv{nd}d: groups={groups} must divide channels in={cin} out={cout}")
    if weight.dims[1] * groups != cin:
        raise ShapeError(f"conv{nd}d: weight expects {weight.dims[1] * groups} input channels, input has {cin}")
    if bias is not None and bias.dims != (cout,):
        raise ShapeError(f"conv{nd}d: bias {bias.dims} does not match {cout} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec = ConvSpec()) -> Tensor:
    """Cross-correlation of x[N,Cin,H,W] with weight[Cout,Cin/groups,kh,kw]."""
    _check_conv_operands(x, weight, bias, spec.groups, 2)
    geom = dict(stride=(spec.stride,) * 2, padding=(spec.padding,) * 2,
                dilation=(spec.dilation,) * 2, groups=spec.groups)
    out, cols, mats, _ = _conv_forward(x.data, weight.data, None if bias is None else bias.data, **geom)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv", inputs, out, cols=cols, mats=mats, geom=geom)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec = ConvSpec()) -> Tensor:
    """Cross-correlation of x[N,C,L] with weight[Cout,C/groups,k]."""
    _check_conv_operands(x, weight, bias, spec.groups, 1)
    geom = dict(stride=(1, spec.stride), padding=(0, spec.padding),
                dilation=(1, spec.dilation), groups=spec.groups)
    x4 = x.data[:, :, None, :]
    w4 = weight.data[:, :, None, :]
    out, cols, mats, _ = _conv_forward(x4, w4, None if bias is None else bias.data, **geom)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv1d", inputs, out[:, :, 0, :], cols=cols, mats=mats, geom=geom)


@backward_rule("conv")
def _conv_bw(node, g):
    x, w = node.inputs[:2]
    gx, gw = _conv_backward(g, x.data, w.data, node.saved["cols"], node.saved["mats"], **node.saved["geom"])
    if len(node.inputs) == 2:
        return gx, gw
    return gx, gw, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)


@backward_rule("conv1d")
def _conv1d_bw(node, g):
    x, w = node.inputs[:2]
    gx, gw = _conv_backward(g[:, :, None, :], x.data[:, :, None, :], w.data[:, :, None, :],
                            node.saved["cols"], node.saved["mats"], **node.saved["geom"])
    gx, gw = gx[:, :, 0, :], gw[:, :, 0, :]
    if len(node.inputs) == 2:
        return gx, gw
    return gx, gw, g.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype)


# ---------------------------------------------------------------- normalization

def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis but 1, accumulated in float64."""
    return a.swapaxes(0, 1).reshape(a.shape[1], -1).sum(axis=1, dtype=np.float64)


def _channel_moments(x: np.ndarray):
    """Per-channel mean and biased variance of [N,C,H,W], accumulated in float64."""
    rows = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1).astype(np.float64)
    mu = rows.mean(axis=1)
    dev = rows - mu[:, None]
    return mu, np.einsum("ij,ij->i", dev, dev) / rows.shape[1]


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of x[N,C,H,W].

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, exponential averaging).
    """
    if x.ndim != 4 or gamma.dims != (x.dims[1],) or beta.dims != (x.dims[1],):
        raise ShapeError(f"batch_norm: input {x.dims} with gamma {gamma.dims}, beta {beta.dims}")
    count = x.dims[0] * x.dims[2] * x.dims[3]
    dtype = np.result_type(x.data, gamma.data)
    if training:
        if count < 2:
            raise ConfigError("batch_norm in training mode needs at least two values per channel")
        mu, var = _channel_moments(x.data)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = (x.data - mu.astype(dtype).reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)
    return record("batch_norm", (x, gamma, beta), out.astype(dtype, copy=False),
                  xhat=xhat, inv_std=inv_std, training=training)


@backward_rule("batch_norm")
def _batch_norm_bw(node, g):
    x, gamma, _ = node.inputs
    xhat, inv_std = node.saved["xhat"], node.saved["inv_std"]
    ggamma = _channel_sum(g * xhat)
    gbeta = _channel_sum(g)
    scale = (gamma.data * inv_std).reshape(1, -1, 1, 1)
    if node.saved["training"]:
        count = x.dims[0] * x.dims[2] * x.dims[3]
        gx = scale * (g - (gbeta / count).reshape(1, -1, 1, 1).astype(g.dtype)
                      - xhat * (ggamma / count).reshape(1, -1, 1, 1).astype(g.dtype))
    else:
        gx = g * scale
    return gx.astype(g.dtype, copy=False), ggamma.astype(g.dtype), gbeta.astype(g.dtype)


# ---------------------------------------------------------------- softmax / loss

def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis of [N,K]."""
    if x.ndim != 2:
        raise ShapeError(f"softmax expects [N,K], got {x.dims}")
    return record("softmax", (x,), _softmax(x.data))


@backward_rule("softmax")
def _softmax_bw(node, g):
    p = node.out.data
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean over rows of -log softmax(logits)[target]; also returns the probabilities."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.dims}")
    n, k = logits.dims
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape != (n,):
        raise ShapeError(f"{targets.shape[0]} targets for {n} rows")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target outside [0, {k})")
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    nll = log_norm - shifted[np.arange(n), targets]
    probs = np.exp(shifted - log_norm[:, None])
    loss = np.asarray(nll.mean(), dtype=logits.data.dtype)
    out = record("softmax_ce", (logits,), loss, probs=probs, targets=targets)
    return out, probs.astype(logits.data.dtype)


@backward_rule("softmax_ce")
def _softmax_ce_bw(node, g):
    probs, targets = node.saved["probs"], node.saved["targets"]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), targets] -= 1.0
    return ((d * (float(g) / n)).astype(node.inputs[0].data.dtype),)
