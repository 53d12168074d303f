"""Neural-network layers, loss, and optimizer on top of the tensor kernels.

Convolution is im2col + one sgemm. The column buffer is laid out K-major
([C*kh*kw, B*OH*OW]) so the patch copies stay near-contiguous, and the GEMM
consumes its transpose as an F-ordered view; both orientations measured
fastest on this substrate. Scratch buffers are pooled per shape because
repeated large allocations dominate runtime otherwise (page-fault churn).
Training is single-threaded by contract, so the pool needs no locking.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import (
    DualTensor,
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
    UnsupportedKernelError,
    needs_aware,
    record,
)

_SCRATCH: dict[tuple, np.ndarray] = {}


def _scratch(key: str, shape: tuple, zero: bool = False) -> np.ndarray:
    buf = _SCRATCH.get((key, shape))
    if buf is None:
        buf = np.zeros(shape, dtype=np.float32) if zero else np.empty(shape, dtype=np.float32)
        _SCRATCH[(key, shape)] = buf
    elif zero:
        buf.fill(0.0)
    return buf


def clear_scratch():
    _SCRATCH.clear()


class Module:
    """Minimal module tree: parameters, buffers, and a train/eval flag."""

    def __init__(self):
        self.training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _named_tensors(self, prefix: str, want_params: bool, out: dict):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                if want_params:
                    out[full] = value
            elif isinstance(value, Tensor):
                if not want_params:
                    out[full] = value
        for name, child in self.children():
            child._named_tensors(f"{prefix}{name}.", want_params, out)

    def named_params(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        self._named_tensors(prefix, True, out)
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self._named_tensors(prefix, False, out)
        return out

    def named_state(self, prefix: str = "") -> dict[str, Tensor]:
        state = self.named_params(prefix)
        state.update(self.named_buffers(prefix))
        return state

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True):
        state = self.named_state()
        if strict:
            missing = sorted(set(state) - set(arrays))
            unexpected = sorted(set(arrays) - set(state))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for name, tensor in state.items():
            if name not in arrays:
                continue
            arr = arrays[name]
            if tuple(arr.shape) != tensor.shape:
                raise ShapeError(
                    f"load_state: {name} expects shape {tensor.shape}, got {tuple(arr.shape)}"
                )
            tensor.data[...] = arr
        return self

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _fill_col(col_v, xp, kh, kw, stride, oh, ow):
    # col_v: [C, kh, kw, B, OH, OW]; xp: [B, C, Hp, Wp]
    for i in range(kh):
        hi = i + stride * (oh - 1) + 1
        for j in range(kw):
            wj = j + stride * (ow - 1) + 1
            np.copyto(col_v[:, i, j], xp[:, :, i:hi:stride, j:wj:stride].transpose(1, 0, 2, 3))


def _pad_input(x_data, pad):
    if pad == 0:
        return x_data
    b, c, h, w = x_data.shape
    xp = _scratch("conv.xp", (b, c, h + 2 * pad, w + 2 * pad), zero=True)
    xp[:, :, pad : pad + h, pad : pad + w] = x_data
    return xp


def _conv_raw(x_data: np.ndarray, w_data: np.ndarray, b_data, stride: int, pad: int) -> np.ndarray:
    bsz, c, h, w = x_data.shape
    o, _, kh, kw = w_data.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    n = bsz * oh * ow
    k = c * kh * kw

    xp = _pad_input(x_data, pad)
    col = _scratch("conv.col", (k, n))
    _fill_col(col.reshape(c, kh, kw, bsz, oh, ow), xp, kh, kw, stride, oh, ow)
    wk = np.ascontiguousarray(w_data.reshape(o, k).T)
    out_rows = col.T @ wk  # [N, O], col.T is an F-ordered view
    if b_data is not None:
        out_rows += b_data
    out = np.empty((bsz, o, oh, ow), dtype=np.float32)
    np.copyto(out, out_rows.reshape(bsz, oh, ow, o).transpose(0, 3, 1, 2))
    return out


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0):
    """2D convolution over [B, C, H, W]; differentiable in both modes."""
    if T._is_dual(x) or T._is_dual(weight):
        xp_, xt = T._split(x)
        wp_, wt = T._split(weight)
        bp_, _ = T._split(bias) if bias is not None else (None, None)
        p = conv2d(xp_, wp_, bp_, stride, padding)
        tan = None
        if xt is not None:
            tan = _conv_raw(xt, wp_.data, None, stride, padding)
        if wt is not None:
            t2 = _conv_raw(xp_.data, wt, None, stride, padding)
            tan = t2 if tan is None else tan + t2
        if tan is None:
            tan = np.zeros(p.shape, dtype=np.float32)
        return DualTensor(p, Tensor(tan))

    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.shape} and {weight.shape}")
    bsz, c, h, w = x.shape
    o, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cin}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} (pad {padding})")
    out = Tensor(_conv_raw(x.data, weight.data, bias.data if bias is not None else None, stride, padding))

    n = bsz * oh * ow
    k = c * kh * kw

    @needs_aware
    def pull(g, needs):
        g_rows = _scratch("conv.grows", (n, o))
        np.copyto(g_rows.reshape(bsz, oh, ow, o), g.transpose(0, 2, 3, 1))
        need_x, need_w = needs[0], needs[1]
        need_b = len(needs) > 2 and needs[2]
        gb = g_rows.sum(axis=0) if need_b else None
        gw = None
        if need_w:
            xp = _pad_input(x.data, padding)
            col = _scratch("conv.col", (k, n))
            _fill_col(col.reshape(c, kh, kw, bsz, oh, ow), xp, kh, kw, stride, oh, ow)
            gw = (col @ g_rows).T.reshape(o, c, kh, kw).copy()
        gx = None
        if need_x:
            wk = np.ascontiguousarray(weight.data.reshape(o, k).T)
            dcol = _scratch("conv.dcol", (k, n))
            np.matmul(wk, g_rows.T, out=dcol)
            dv = dcol.reshape(c, kh, kw, bsz, oh, ow)
            hp, wp = h + 2 * padding, w + 2 * padding
            dxp = _scratch("conv.dxp", (bsz, c, hp, wp), zero=True)
            for i in range(kh):
                hi = i + stride * (oh - 1) + 1
                for j in range(kw):
                    wj = j + stride * (ow - 1) + 1
                    dxp[:, :, i:hi:stride, j:wj:stride] += dv[:, i, j].transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding : padding + h, padding : padding + w].copy()
        if need_b:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    record(out, inputs, pull)
    return out


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_out = out_ch * kernel * kernel
        std = math.sqrt(2.0 / fan_out)
        init = (
            rng.normal((out_ch, in_ch, kernel, kernel), scale=std)
            if rng is not None
            else np.zeros((out_ch, in_ch, kernel, kernel), dtype=np.float32)
        )
        self.weight = Parameter(init)
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, in_shape):
        b, _, h, w = in_shape
        return (
            b,
            self.out_ch,
            _conv_out_size(h, self.kernel, self.stride, self.padding),
            _conv_out_size(w, self.kernel, self.stride, self.padding),
        )


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(x, gamma, beta, running_mean, running_var, momentum, eps, training: bool):
    """Per-channel batch normalization over [B, C, H, W].

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode is a deterministic affine map from frozen
    running statistics. Forward-mode (dual) execution is supported in eval
    mode only; the train-mode statistics path has no JVP rule and none of
    the flow-side computations need one.
    """
    if T._is_dual(x):
        if training:
            raise UnsupportedKernelError("batchnorm2d: no forward-mode rule in train mode")
        invstd = 1.0 / np.sqrt(running_var.data + np.float32(eps))
        scale_c = (gamma.data * invstd).reshape(1, -1, 1, 1)
        p = batchnorm2d(x.primal, gamma, beta, running_mean, running_var, momentum, eps, False)
        return DualTensor(p, Tensor(x.tangent.data * scale_c))

    if x.ndim != 4 or x.shape[1] != gamma.size:
        raise ShapeError(f"batchnorm2d: input {x.shape} incompatible with {gamma.size} channels")
    c = x.shape[1]
    n = x.size // c

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = np.mean(centered * centered, axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + np.float32(eps))
        xhat = centered * invstd.reshape(1, c, 1, 1)
        m = np.float32(momentum)
        running_mean.data[...] = (1 - m) * running_mean.data + m * mean
        unbiased = var * (n / max(n - 1, 1))
        running_var.data[...] = (1 - m) * running_var.data + m * unbiased
    else:
        mean = running_mean.data
        invstd = 1.0 / np.sqrt(running_var.data + np.float32(eps))
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)

    out = Tensor(gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1))

    @needs_aware
    def pull(g, needs):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if (needs[1] or (needs[0] and training)) else None
        gb = g.sum(axis=(0, 2, 3)) if (needs[2] or (needs[0] and training)) else None
        gx = None
        if needs[0]:
            gscale = (gamma.data * invstd).reshape(1, c, 1, 1)
            if training:
                gx = gscale * (
                    g
                    - (gb / n).reshape(1, c, 1, 1)
                    - xhat * (gg / n).reshape(1, c, 1, 1)
                )
            else:
                gx = g * gscale
        return (
            gx,
            gg if needs[1] else None,
            gb if needs[2] else None,
        )

    record(out, (x, gamma, beta), pull)
    return out


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = Tensor(np.zeros(channels, dtype=np.float32))
        self.running_var = Tensor(np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.momentum,
            self.eps,
            self.training,
        )


# ---------------------------------------------------------------------------
# linear / pooling / loss


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng=None, zero_init=False):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init or rng is None:
            w = np.zeros((in_dim, out_dim), dtype=np.float32)
            b = np.zeros(out_dim, dtype=np.float32)
        else:
            bound = 1.0 / math.sqrt(in_dim)
            w = rng.uniform((in_dim, out_dim), -bound, bound)
            b = rng.uniform((out_dim,), -bound, bound)
        self.weight = Parameter(w)
        self.bias = Parameter(b)

    def forward(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)


def avgpool_global(x):
    """[B, C, H, W] -> [B, C] spatial mean."""
    if (x.ndim if not T._is_dual(x) else len(x.shape)) != 4:
        raise ShapeError(f"avgpool_global: expected 4-d input, got {x.shape}")
    return T.mean_over(x, axes=(2, 3))


def cross_entropy_label_smoothed(logits, labels, epsilon: float = 0.1):
    """Mean label-smoothed cross entropy over the batch.

    Targets are q = (1-eps) * onehot + eps / K against log-softmax of the
    logits. Labels outside [0, K) raise.
    """
    if T._is_dual(logits):
        raise UnsupportedKernelError("cross_entropy_label_smoothed: no forward-mode rule")
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [B, K], got {logits.shape}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"cross_entropy: label {bad} outside [0, {k})")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"cross_entropy: epsilon {epsilon} outside [0, 1)")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    q = np.full((b, k), epsilon / k, dtype=np.float32)
    q[np.arange(b), labels] += np.float32(1.0 - epsilon)
    loss = Tensor(-(q * logp).sum() / np.float32(b))

    def pull(g):
        softmax = np.exp(logp)
        return ((softmax - q) * (g / np.float32(b)),)

    record(loss, (logits,), pull)
    return loss


# ---------------------------------------------------------------------------
# optimizer / schedule


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: dict[str, Parameter], lr, weight_decay=0.01,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.betas = betas
        self.eps = float(eps)
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict[str, Tensor]):
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = grads[name].data
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / np.float32(bc1)
            vhat = v / np.float32(bc2)
            update = mhat / (np.sqrt(vhat) + np.float32(self.eps))
            if self.weight_decay:
                update = update + np.float32(self.weight_decay) * p.data
            p.data -= np.float32(self.lr) * update


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from `base` at epoch 0 to exactly 0 at `total_epochs`."""
    if total_epochs <= 0:
        return base
    if epoch >= total_epochs:
        return 0.0
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / total_epochs))
