"""Stage mapping modules: alignment, time sampling, velocity nets, flow loss.

A stage mapper replaces a stack of residual blocks with one (stages 1-3) or
two (stage 4) average-velocity networks operating on spatially flattened
features. Training regresses each network onto a target velocity built from
the displacement between aligned source features and teacher target
features, corrected by the directional derivative of the network along the
interpolation path (computed in one forward-mode pass).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr, ndtri

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .rng import SeededRng
from .tensor import NumericalError, Parameter, ShapeError, Tensor, jvp
from .training import FitHyper, iterate_batches
from .nn import AdamW, cosine_lr

JVP_MODES = ("full", "literal")


@dataclass
class TimePairBatch:
    """Per-row (start, end) times, each [N, 1] float32 with 0 <= r <= t <= 1."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float32).reshape(-1, 1)
        self.t = np.asarray(self.t, dtype=np.float32).reshape(-1, 1)
        if self.r.shape != self.t.shape:
            raise ShapeError(f"time pairs: r {self.r.shape} vs t {self.t.shape}")
        if self.r.min() < 0 or self.t.max() > 1 or np.any(self.r > self.t):
            raise ValueError("time pairs must satisfy 0 <= r <= t <= 1")

    def __len__(self):
        return self.r.shape[0]

    def rescaled(self, lo: float, hi: float) -> "TimePairBatch":
        """Affine map of the pairs into [lo, hi]."""
        span = np.float32(hi - lo)
        lo = np.float32(lo)
        return TimePairBatch(lo + span * self.r, lo + span * self.t)


def sample_time_pairs(
    rng: SeededRng,
    n: int,
    mean: float = -0.4,
    std: float = 1.0,
    equal_fraction: float = 0.75,
) -> TimePairBatch:
    """Draw (r, t) pairs for flow training.

    t is sigmoid(N(mean, std^2)), so its marginal is exactly the configured
    logit-normal. With probability `equal_fraction` the pair collapses to
    r = t (endpoint identity); otherwise r is drawn from the same
    logit-normal conditioned on r <= t via inverse-CDF truncation.
    """
    g = rng.child("t").normal((n,)).astype(np.float64)
    t = expit(mean + std * g)
    eq = rng.child("collapse").random((n,)) < equal_fraction
    u = rng.child("r").random((n,))
    with np.errstate(divide="ignore"):
        r_trunc = expit(mean + std * ndtri(u * ndtr(g)))
    r = np.where(eq, t, r_trunc)
    r32 = r.astype(np.float32)
    t32 = t.astype(np.float32)
    np.minimum(r32, t32, out=r32)  # float32 rounding must not break r <= t
    return TimePairBatch(r32, t32)


class AlignmentLayer(Module):
    """1x1 conv + BN + ReLU mapping stage-input dims onto stage-output dims."""

    def __init__(self, in_dims, out_dims, rng):
        super().__init__()
        c_in, h_in, w_in = in_dims
        c_out, h_out, w_out = out_dims
        if h_in % h_out or w_in % w_out or h_in // h_out != w_in // w_out:
            raise ShapeError(f"alignment: cannot map {in_dims} onto {out_dims}")
        ratio = h_in // h_out
        if ratio not in (1, 2):
            raise ShapeError(f"alignment: unsupported spatial ratio {ratio}")
        self.in_dims = tuple(in_dims)
        self.out_dims = tuple(out_dims)
        self.conv = Conv2d(c_in, c_out, 1, stride=ratio, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_dims:
            raise ShapeError(f"alignment: expected input dims {self.in_dims}, got {x.shape}")
        return T.relu(self.bn.forward(self.conv.forward(x)))


def align(x, layer: AlignmentLayer):
    return layer.forward(x)


class VelocityNet(Module):
    """Per-location MLP over channel vectors, conditioned on (r, t).

    Times enter through sinusoidal features mixed by a linear layer; the
    conditioning adds into the first hidden layer, which is arithmetically
    identical to concatenating [z, embedding] in front of one weight matrix.
    The output projection is zero-initialized so an untrained net is the
    zero field (identity transport).
    """

    def __init__(self, channels: int, hidden: int, embed: int, rng: SeededRng):
        super().__init__()
        if embed % 2:
            raise ValueError("time embedding width must be even")
        self.channels = channels
        self.hidden = hidden
        self.embed = embed
        half = embed // 2
        # times live in [0, 1]; keep max frequency modest because the
        # regression target contains du/dt, which scales with frequency
        self.freqs = Tensor(np.geomspace(1.0, 20.0, half).astype(np.float32))
        scale_mix = 1.0 / np.sqrt(2 * embed)
        self.mix_w = Parameter(rng.normal((2 * embed, embed), scale=scale_mix))
        self.mix_b = Parameter(np.zeros(embed, dtype=np.float32))
        self.w1z = Parameter(rng.normal((channels, hidden), scale=np.sqrt(2.0 / channels)))
        self.w1e = Parameter(rng.normal((embed, hidden), scale=np.sqrt(2.0 / embed)))
        self.b1 = Parameter(np.zeros(hidden, dtype=np.float32))
        self.w2 = Parameter(rng.normal((hidden, hidden), scale=np.sqrt(2.0 / hidden)))
        self.b2 = Parameter(np.zeros(hidden, dtype=np.float32))
        self.w3 = Parameter(np.zeros((hidden, channels), dtype=np.float32))
        self.b3 = Parameter(np.zeros(channels, dtype=np.float32))

    def _time_features(self, tau):
        phase = T.multiply(tau, self.freqs)
        return T.concat([T.sin(phase), T.cos(phase)], axis=1)

    def time_embedding(self, r, t):
        feats = T.concat([self._time_features(r), self._time_features(t)], axis=1)
        return T.add(T.matmul(feats, self.mix_w), self.mix_b)

    def forward(self, z, r, t):
        """z: [N, C] rows; r, t: [N, 1] tensors or python floats (broadcast)."""
        if isinstance(r, float) or isinstance(r, int):
            r = Tensor(np.array([[r]], dtype=np.float32))
        if isinstance(t, float) or isinstance(t, int):
            t = Tensor(np.array([[t]], dtype=np.float32))
        emb = self.time_embedding(r, t)
        h = T.add(T.add(T.matmul(z, self.w1z), T.matmul(emb, self.w1e)), self.b1)
        h = T.relu(h)
        h = T.relu(T.add(T.matmul(h, self.w2), self.b2))
        return T.add(T.matmul(h, self.w3), self.b3)


class MeanFlowModule(Module):
    """Alignment plus one velocity net (stages 1-3) or two (stage 4)."""

    def __init__(self, stage_index, in_dims, out_dims, hidden, embed, rng,
                 jvp_mode: str = "full"):
        super().__init__()
        if jvp_mode not in JVP_MODES:
            raise ValueError(f"jvp_mode must be one of {JVP_MODES}")
        self.stage_index = stage_index
        self.two_step = stage_index == 4
        self.hidden = hidden
        self.embed = embed
        self.jvp_mode = jvp_mode
        self.align = AlignmentLayer(in_dims, out_dims, rng.child("align"))
        c_out = out_dims[0]
        n_nets = 2 if self.two_step else 1
        self.nets = [
            VelocityNet(c_out, hidden, embed, rng.child("net", k)) for k in range(n_nets)
        ]

    @property
    def in_dims(self):
        return self.align.in_dims

    @property
    def out_dims(self):
        return self.align.out_dims


def to_rows(x):
    """[B, C, H, W] -> [(B*H*W), C]."""
    b, c, h, w = x.shape
    return T.reshape(T.permute(x, (0, 2, 3, 1)), (b * h * w, c))


def from_rows(rows, b, c, h, w):
    """[(B*H*W), C] -> [B, C, H, W]."""
    return T.permute(T.reshape(rows, (b, h, w, c)), (0, 3, 1, 2))


@dataclass
class FlowBatch:
    """Flattened flow-matching batch; all row tensors share one shape."""

    z_align: Tensor
    z_target: Tensor
    v: Tensor
    pairs: TimePairBatch
    z_t: Tensor | None = None

    def __post_init__(self):
        if self.z_align.shape != self.z_target.shape:
            raise ShapeError(
                f"flow batch: aligned {self.z_align.shape} vs target {self.z_target.shape}"
            )
        if len(self.pairs) != self.z_align.shape[0]:
            raise ShapeError(
                f"flow batch: {len(self.pairs)} time pairs for {self.z_align.shape[0]} rows"
            )


def build_flow_batch(z_align, z_target, pairs: TimePairBatch) -> FlowBatch:
    v = Tensor(z_align.data - z_target.data)  # displacement; endpoints fixed
    batch = FlowBatch(z_align=z_align, z_target=z_target, v=v, pairs=pairs)
    batch.z_t = make_interpolant(batch)
    return batch


def make_interpolant(batch: FlowBatch):
    """Linear path z(t) = (1-t) * z_align + t * z_target, per-row t.

    The two-sided convex form makes both boundary conditions exact in
    float32 (t=0 reproduces z_align bit-for-bit, t=1 reproduces z_target).
    """
    t = Tensor(batch.pairs.t)
    one_minus_t = Tensor(np.float32(1.0) - batch.pairs.t)
    return T.add(T.multiply(one_minus_t, batch.z_align), T.multiply(t, batch.z_target))


def _jvp_through_net(net: VelocityNet, z_t, pairs: TimePairBatch, v, mode: str):
    n = z_t.shape[0]
    r_in = Tensor(pairs.r)
    t_in = Tensor(pairs.t)
    if mode == "full":
        dz = np.negative(v.data)
    elif mode == "literal":
        dz = np.zeros_like(v.data)
    else:
        raise ValueError(f"jvp_mode must be one of {JVP_MODES}")
    tangents = [
        Tensor(dz),
        Tensor(np.zeros((n, 1), dtype=np.float32)),
        Tensor(np.ones((n, 1), dtype=np.float32)),
    ]
    return jvp(net.forward, [z_t, r_in, t_in], tangents)


def target_velocity(net: VelocityNet, z_t, pairs: TimePairBatch, v, mode: str = "full"):
    """Regression target: v - (t - r) * du/dt, detached from the graph.

    "full" mode takes the total derivative along the path (tangents
    (-v, 0, 1) for (z, r, t)); "literal" takes only the explicit time
    partial (tangents (0, 0, 1)).
    """
    _, du_dt = _jvp_through_net(net, z_t, pairs, v, mode)
    if not np.all(np.isfinite(du_dt.data)):
        raise NumericalError("target velocity: non-finite directional derivative")
    gap = pairs.t - pairs.r
    return Tensor(v.data - gap * du_dt.data)


def flow_matching_loss(net: VelocityNet, batch: FlowBatch, mode: str = "full"):
    """Mean squared error between predicted and target velocity over rows.

    One dual pass supplies both the prediction (primal, recorded on any
    active tape) and the directional derivative for the target (tangent,
    never recorded); the target is used as a detached constant.
    """
    u_pred, du_dt = _jvp_through_net(net, batch.z_t, batch.pairs, batch.v, mode)
    if not np.all(np.isfinite(du_dt.data)):
        raise NumericalError("flow loss: non-finite directional derivative")
    gap = batch.pairs.t - batch.pairs.r
    u_target = Tensor(batch.v.data - gap * du_dt.data)
    diff = T.subtract(u_pred, u_target)
    n_rows = diff.shape[0]
    return T.scale(T.sum_over(T.multiply(diff, diff)), 1.0 / n_rows)


def flow_loss_frozen_targets(net: VelocityNet, batch: FlowBatch, u_target: Tensor):
    """Same objective with externally fixed targets (detachment oracle)."""
    u_pred = net.forward(batch.z_t, Tensor(batch.pairs.r), Tensor(batch.pairs.t))
    diff = T.subtract(u_pred, u_target.detach())
    return T.scale(T.sum_over(T.multiply(diff, diff)), 1.0 / diff.shape[0])


def map_single_step(module: MeanFlowModule, x):
    """One-step transport for stages 1-3: z_align - u(z_align, 0, 1)."""
    if module.two_step:
        raise ValueError("stage-4 module requires map_two_step")
    aligned = module.align.forward(x)
    b, c, h, w = aligned.shape
    rows = to_rows(aligned)
    u = module.nets[0].forward(rows, 0.0, 1.0)
    return from_rows(T.subtract(rows, u), b, c, h, w)


def map_two_step(module: MeanFlowModule, x):
    """Two half-interval transports for stage 4."""
    if not module.two_step or len(module.nets) != 2:
        raise ValueError("map_two_step needs a stage-4 module with two velocity nets")
    aligned = module.align.forward(x)
    b, c, h, w = aligned.shape
    rows = to_rows(aligned)
    mid = T.subtract(rows, T.scale(module.nets[0].forward(rows, 0.0, 0.5), 0.5))
    out = T.subtract(mid, T.scale(module.nets[1].forward(mid, 0.5, 1.0), 0.5))
    return from_rows(out, b, c, h, w)


def map_stage(module: MeanFlowModule, x):
    return map_two_step(module, x) if module.two_step else map_single_step(module, x)


SUB_INTERVALS = ((0.0, 0.5), (0.5, 1.0))


@dataclass
class FlowFitResult:
    history: list  # (epoch, loss, lr, wall_time_s)
    final_loss: float


def train_stage_meanflow(
    src: np.ndarray,
    dst: np.ndarray,
    module: MeanFlowModule,
    hyper: FitHyper,
    rng: SeededRng,
    on_epoch=None,
) -> FlowFitResult:
    """Fit one stage mapper on (input tap, output tap) activation pairs.

    For stage 4 both sub-interval nets train jointly (they share the
    alignment layer); each net's time pairs are rescaled into its own
    half interval.
    """
    import time as _time

    n = src.shape[0]
    module.train()
    params = module.named_params()
    opt = AdamW(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
    history = []
    t0 = _time.perf_counter()
    for epoch in range(hyper.epochs):
        opt.lr = cosine_lr(hyper.lr, epoch, hyper.epochs)
        order = rng.child("shuffle", epoch).permutation(n)
        pair_rng = rng.child("pairs", epoch)
        loss_sum = 0.0
        seen = 0
        for step, batch_idx in enumerate(iterate_batches(n, hyper.batch_size, order)):
            x = Tensor(src[batch_idx])
            tape = T.GradTape()
            with tape:
                tape.watch_params(params)
                aligned = module.align.forward(x)
                b, c, h, w = aligned.shape
                rows_al = to_rows(aligned)
                rows_tg = Tensor(
                    np.ascontiguousarray(dst[batch_idx].transpose(0, 2, 3, 1)).reshape(-1, c)
                )
                base = sample_time_pairs(pair_rng.child("step", step), b * h * w)
                if module.two_step:
                    loss = None
                    for net, (lo, hi) in zip(module.nets, SUB_INTERVALS):
                        fb = build_flow_batch(rows_al, rows_tg, base.rescaled(lo, hi))
                        part = flow_matching_loss(net, fb, module.jvp_mode)
                        loss = part if loss is None else T.add(loss, part)
                else:
                    fb = build_flow_batch(rows_al, rows_tg, base)
                    loss = flow_matching_loss(module.nets[0], fb, module.jvp_mode)
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericalError(
                    f"stage-{module.stage_index} flow training diverged at epoch {epoch}"
                )
            grads = T.backward(loss, tape)
            opt.step(grads)
            loss_sum += lval * len(batch_idx)
            seen += len(batch_idx)
        epoch_loss = loss_sum / seen
        history.append((epoch, epoch_loss, opt.lr, _time.perf_counter() - t0))
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, opt.lr)
    module.eval()
    return FlowFitResult(history=history, final_loss=history[-1][1] if history else float("nan"))


def map_error(module: MeanFlowModule, src: np.ndarray, dst: np.ndarray, batch_size=256) -> float:
    """Mean per-element squared error between mapped output and target tap."""
    modes = [(m, m.training) for m in module.modules()]
    module.eval()
    try:
        total = 0.0
        count = 0
        for batch_idx in iterate_batches(src.shape[0], batch_size):
            out = map_stage(module, Tensor(src[batch_idx]))
            diff = out.data - dst[batch_idx]
            total += float((diff * diff).sum())
            count += diff.size
    finally:
        for m, flag in modes:
            m.training = flag
    return total / count
