import numpy as np
import pytest

from stageflow import tensor as T
from stageflow.meanflow import (
    AlignmentLayer,
    FlowBatch,
    MeanFlowModule,
    TimePairBatch,
    VelocityNet,
    build_flow_batch,
    flow_loss_frozen_targets,
    flow_matching_loss,
    make_interpolant,
    map_error,
    map_single_step,
    map_stage,
    map_two_step,
    sample_time_pairs,
    target_velocity,
    to_rows,
    train_stage_meanflow,
)
from stageflow.nn import Module
from stageflow.rng import SeededRng
from stageflow.tensor import Parameter, ShapeError, Tensor
from stageflow.training import FitHyper
from util import rel_err, tape_grads


# ---------------------------------------------------------------------------
# time sampling


def test_time_pairs_in_unit_interval_and_ordered():
    pairs = sample_time_pairs(SeededRng(0), 10000)
    assert pairs.r.min() >= 0 and pairs.t.max() <= 1
    assert np.all(pairs.r <= pairs.t)
    assert 0 < pairs.t.min() and pairs.t.max() < 1  # sigmoid range is open


def test_time_pairs_equal_fraction():
    pairs = sample_time_pairs(SeededRng(123), 100000)
    frac = float((pairs.r == pairs.t).mean())
    assert 0.74 <= frac <= 0.76


def _logit_normal_cdf_by_integration(xs, mean=-0.4, std=1.0):
    # independent reference: numerically integrate the density on a fine grid
    grid = np.linspace(1e-7, 1 - 1e-7, 400001)
    z = (np.log(grid / (1 - grid)) - mean) / std
    pdf = np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * std * grid * (1 - grid))
    cdf = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) * 0.5 * np.diff(grid))])
    cdf /= cdf[-1]
    return np.interp(xs, grid, cdf)


def test_time_marginal_matches_reference_cdf():
    pairs = sample_time_pairs(SeededRng(7), 100000)
    ts = np.sort(pairs.t.reshape(-1).astype(np.float64))
    ecdf = np.arange(1, ts.size + 1) / ts.size
    ref = _logit_normal_cdf_by_integration(ts)
    ks = np.max(np.abs(ecdf - ref))
    assert ks < 0.01


def test_time_pairs_deterministic_per_seed():
    a = sample_time_pairs(SeededRng(42), 1000)
    b = sample_time_pairs(SeededRng(42), 1000)
    np.testing.assert_array_equal(a.r, b.r)
    np.testing.assert_array_equal(a.t, b.t)


def test_time_pair_rescaling():
    pairs = sample_time_pairs(SeededRng(3), 1000)
    lo, hi = 0.5, 1.0
    sub = pairs.rescaled(lo, hi)
    assert sub.r.min() >= lo and sub.t.max() <= hi
    assert np.all(sub.r <= sub.t)
    np.testing.assert_array_equal((pairs.r == pairs.t), (sub.r == sub.t))


def test_time_pair_validation():
    with pytest.raises(ValueError, match="0 <= r <= t <= 1"):
        TimePairBatch(np.array([0.7]), np.array([0.3]))


# ---------------------------------------------------------------------------
# alignment


def test_alignment_stride2_shape():
    layer = AlignmentLayer((256, 32, 32), (512, 16, 16), SeededRng(0))
    layer.eval()
    out = layer.forward(Tensor(SeededRng(1).normal((2, 256, 32, 32))))
    assert out.shape == (2, 512, 16, 16)
    assert layer.conv.stride == 2


def test_alignment_same_spatial_is_stride1():
    layer = AlignmentLayer((64, 32, 32), (256, 32, 32), SeededRng(0))
    assert layer.conv.stride == 1


def test_alignment_zero_input_finite_and_shaped():
    layer = AlignmentLayer((8, 8, 8), (16, 4, 4), SeededRng(0))
    layer.eval()
    out = layer.forward(Tensor(np.zeros((3, 8, 8, 8))))
    assert out.shape == (3, 16, 4, 4)
    assert np.all(np.isfinite(out.data))
    assert out.data.min() >= 0  # relu is applied last


def test_alignment_unsupported_ratio():
    with pytest.raises(ShapeError, match="ratio"):
        AlignmentLayer((8, 16, 16), (16, 4, 4), SeededRng(0))


# ---------------------------------------------------------------------------
# interpolant


def _rows(rng, n=6, c=4):
    return Tensor(rng.normal((n, c))), Tensor(rng.normal((n, c)))


def test_interpolant_boundaries_exact():
    rng = SeededRng(11)
    za, zt = _rows(rng)
    at0 = build_flow_batch(za, zt, TimePairBatch(np.zeros(6), np.zeros(6)))
    np.testing.assert_array_equal(at0.z_t.data, za.data)
    at1 = build_flow_batch(za, zt, TimePairBatch(np.ones(6), np.ones(6)))
    np.testing.assert_array_equal(at1.z_t.data, zt.data)


def test_interpolant_midpoint():
    za = Tensor(np.array([[2.0]]))
    zt = Tensor(np.array([[0.0]]))
    batch = build_flow_batch(za, zt, TimePairBatch(np.array([0.5]), np.array([0.5])))
    np.testing.assert_array_equal(batch.z_t.data, np.array([[1.0]], dtype=np.float32))


def test_flow_batch_velocity_recomputable():
    rng = SeededRng(12)
    za, zt = _rows(rng)
    batch = build_flow_batch(za, zt, sample_time_pairs(rng.child("p"), 6))
    np.testing.assert_array_equal(batch.v.data, za.data - zt.data)
    assert batch.z_t.shape == batch.v.shape == batch.z_align.shape == batch.z_target.shape


# ---------------------------------------------------------------------------
# target velocity


@pytest.mark.parametrize("mode", ["full", "literal"])
def test_target_equals_displacement_when_times_collapse(mode):
    rng = SeededRng(20)
    net = VelocityNet(4, 8, 4, rng)
    za, zt = _rows(rng.child("rows"))
    t = sample_time_pairs(rng.child("p"), 6).t
    batch = build_flow_batch(za, zt, TimePairBatch(t, t))
    u_tgt = target_velocity(net, batch.z_t, batch.pairs, batch.v, mode)
    np.testing.assert_array_equal(u_tgt.data, batch.v.data)


@pytest.mark.parametrize("mode", ["full", "literal"])
def test_constant_field_target_is_displacement(mode):
    rng = SeededRng(21)
    net = VelocityNet(4, 8, 4, rng)
    net.w3.data[...] = 0.0
    net.b3.data[...] = 0.7  # u == 0.7 everywhere: all derivatives vanish
    za, zt = _rows(rng.child("rows"))
    batch = build_flow_batch(za, zt, sample_time_pairs(rng.child("p"), 6))
    u_tgt = target_velocity(net, batch.z_t, batch.pairs, batch.v, mode)
    np.testing.assert_allclose(u_tgt.data, batch.v.data, atol=1e-6)


class LinearField(Module):
    """u(z, r, t) = z @ A + t * b; closed-form targets for both modes."""

    def __init__(self, a, b):
        super().__init__()
        self.a = Tensor(a)
        self.b = Tensor(b)

    def forward(self, z, r, t):
        return T.add(T.matmul(z, self.a), T.multiply(t, self.b))


def test_linear_field_targets_match_closed_forms():
    for trial in range(20):
        rng = SeededRng(900 + trial)
        c = 5
        a = rng.normal((c, c), scale=0.5)
        b = rng.normal((c,), scale=0.8)
        net = LinearField(a, b)
        za, zt = _rows(rng.child("rows"), n=8, c=c)
        pairs = sample_time_pairs(rng.child("p"), 8)
        batch = build_flow_batch(za, zt, pairs)
        v64 = batch.v.data.astype(np.float64)
        gap = (pairs.t - pairs.r).astype(np.float64)

        literal = target_velocity(net, batch.z_t, pairs, batch.v, "literal")
        want_literal = v64 - gap * b.astype(np.float64)
        assert rel_err(literal.data, want_literal) <= 1e-5, trial

        full = target_velocity(net, batch.z_t, pairs, batch.v, "full")
        want_full = v64 - gap * ((-v64) @ a.astype(np.float64) + b.astype(np.float64))
        assert rel_err(full.data, want_full) <= 1e-5, trial


# ---------------------------------------------------------------------------
# flow matching loss


def test_loss_zero_when_prediction_equals_target():
    rng = SeededRng(30)
    net = VelocityNet(4, 8, 4, rng)  # zero-initialized output: u == 0
    za = Tensor(rng.child("z").normal((6, 4)))
    batch = build_flow_batch(za, Tensor(za.data.copy()), sample_time_pairs(rng.child("p"), 6))
    loss = flow_matching_loss(net, batch)
    assert loss.item() == 0.0


def test_loss_matches_per_row_brute_force():
    rng = SeededRng(31)
    net = VelocityNet(3, 8, 4, rng)
    net.w3.data[...] = rng.child("w3").normal((8, 3), scale=0.2)
    za, zt = _rows(rng.child("rows"), n=3, c=3)
    pairs = sample_time_pairs(rng.child("p"), 3)
    batch = build_flow_batch(za, zt, pairs)

    loss = flow_matching_loss(net, batch).item()
    u_pred = net.forward(batch.z_t, Tensor(pairs.r), Tensor(pairs.t))
    u_tgt = target_velocity(net, batch.z_t, pairs, batch.v, "full")
    per_row = ((u_pred.data - u_tgt.data) ** 2).sum(axis=1)
    assert loss == pytest.approx(per_row.mean(), rel=1e-5)


def test_loss_scales_quadratically_with_residual():
    rng = SeededRng(32)
    net = VelocityNet(4, 8, 4, rng)
    za, zt = _rows(rng.child("rows"))
    batch = build_flow_batch(za, zt, sample_time_pairs(rng.child("p"), 6))
    zero_targets = Tensor(np.zeros((6, 4), dtype=np.float32))
    net.b3.data[...] = 0.5
    l1 = flow_loss_frozen_targets(net, batch, zero_targets).item()
    net.b3.data[...] = 1.0
    l2 = flow_loss_frozen_targets(net, batch, zero_targets).item()
    assert l2 == pytest.approx(4 * l1, rel=1e-5)


def test_targets_are_detached_from_gradient_graph():
    rng = SeededRng(33)
    net = VelocityNet(3, 6, 4, rng)
    net.w3.data[...] = rng.child("w3").normal((6, 3), scale=0.3)
    za, zt = _rows(rng.child("rows"), n=4, c=3)
    pairs = sample_time_pairs(rng.child("p"), 4)
    # ensure some rows have t > r so the correction term is active
    pairs = TimePairBatch(pairs.r * 0.5, np.clip(pairs.t + 0.1, 0, 1))
    batch = build_flow_batch(za, zt, pairs)

    params = net.named_params()
    grads = tape_grads(lambda: flow_matching_loss(net, batch), params)

    frozen_tgt = target_velocity(net, batch.z_t, pairs, batch.v, "full")

    def detached_objective():
        return flow_loss_frozen_targets(net, batch, frozen_tgt).item()

    def full_objective():
        return flow_matching_loss(net, batch).item()

    # probe the output projection: the detached objective is exactly
    # quadratic in it (no relu kinks between it and the loss), so central
    # differences are a clean oracle
    name = "w3"
    p = params[name]
    fd_detached = np.zeros(p.data.shape, dtype=np.float64)
    fd_full = np.zeros(p.data.shape, dtype=np.float64)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + 1e-2
        dp, fp = detached_objective(), full_objective()
        flat[i] = orig - 1e-2
        dm, fm = detached_objective(), full_objective()
        flat[i] = orig
        fd_detached.reshape(-1)[i] = (dp - dm) / 2e-2
        fd_full.reshape(-1)[i] = (fp - fm) / 2e-2

    # tape gradient equals the finite difference of the detached objective...
    assert rel_err(grads[name].data, fd_detached) <= 1e-3
    # ...and measurably differs from the non-detached objective's gradient
    assert rel_err(fd_full, fd_detached) > 1e-3


# ---------------------------------------------------------------------------
# transport maps


def _module(stage, in_dims, out_dims, seed=0, hidden=8, embed=4):
    m = MeanFlowModule(stage, in_dims, out_dims, hidden, embed, SeededRng(seed))
    m.eval()
    return m


def test_single_step_identity_transport_at_init():
    m = _module(1, (4, 8, 8), (4, 8, 8))
    x = Tensor(SeededRng(1).normal((2, 4, 8, 8)))
    out = map_single_step(m, x)
    np.testing.assert_array_equal(out.data, m.align.forward(x).data)


def test_two_step_identity_transport_at_init():
    m = _module(4, (4, 8, 8), (8, 4, 4))
    x = Tensor(SeededRng(1).normal((2, 4, 8, 8)))
    out = map_two_step(m, x)
    np.testing.assert_array_equal(out.data, m.align.forward(x).data)


def test_map_shapes_follow_stage_dims():
    m = _module(2, (16, 16, 16), (32, 8, 8))
    out = map_single_step(m, Tensor(SeededRng(2).normal((3, 16, 16, 16))))
    assert out.shape == (3, 32, 8, 8)


def test_map_deterministic():
    m = _module(1, (4, 8, 8), (4, 8, 8), seed=5)
    m.nets[0].w3.data[...] = SeededRng(6).normal((8, 4), scale=0.3)
    x = Tensor(SeededRng(7).normal((2, 4, 8, 8)))
    np.testing.assert_array_equal(map_single_step(m, x).data, map_single_step(m, x).data)


def test_stage_mismatch_errors():
    m4 = _module(4, (4, 8, 8), (8, 4, 4))
    with pytest.raises(ValueError, match="two_step"):
        map_single_step(m4, Tensor(np.zeros((1, 4, 8, 8))))
    m1 = _module(1, (4, 8, 8), (4, 8, 8))
    with pytest.raises(ValueError, match="two velocity nets"):
        map_two_step(m1, Tensor(np.zeros((1, 4, 8, 8))))
    m4.nets = m4.nets[:1]
    with pytest.raises(ValueError, match="two velocity nets"):
        map_two_step(m4, Tensor(np.zeros((1, 4, 8, 8))))


def test_two_step_constant_fields_accumulate():
    m = _module(4, (4, 8, 8), (8, 4, 4), seed=9)
    a, b = 0.3, -0.2
    for net, c in zip(m.nets, (a, b)):
        net.w3.data[...] = 0.0
        net.b3.data[...] = c
    x = Tensor(SeededRng(10).normal((2, 4, 8, 8)))
    z0 = m.align.forward(x)
    out = map_two_step(m, x)
    np.testing.assert_allclose(out.data, z0.data - 0.5 * a - 0.5 * b, rtol=1e-5, atol=1e-7)


def test_two_step_equals_single_averaged_constant_field():
    m = _module(4, (4, 8, 8), (8, 4, 4), seed=11)
    for net in m.nets:
        net.w3.data[...] = 0.0
        net.b3.data[...] = 0.4
    x = Tensor(SeededRng(12).normal((2, 4, 8, 8)))
    z0 = m.align.forward(x)
    out = map_two_step(m, x)
    np.testing.assert_allclose(out.data, z0.data - 0.4, rtol=1e-5, atol=1e-7)


# ---------------------------------------------------------------------------
# stage training


def _toy_taps(seed, n=96, c_in=4, c_out=6, hw_in=8, hw_out=4):
    rng = SeededRng(seed)
    src = rng.normal((n, c_in, hw_in, hw_in))
    w = rng.child("map").normal((c_out, c_in * 4), scale=0.3)
    pooled = src.reshape(n, c_in, hw_out, 2, hw_out, 2).mean(axis=(3, 5))
    patches = pooled.reshape(n, c_in, hw_out * hw_out)
    dst = np.einsum("oc,nch->noh", w[:, :c_in], patches).reshape(n, c_out, hw_out, hw_out)
    return src.astype(np.float32), np.maximum(dst, 0).astype(np.float32)


def test_stage_training_reduces_loss_and_map_error():
    src, dst = _toy_taps(40)
    module = MeanFlowModule(1, (4, 8, 8), (6, 4, 4), hidden=32, embed=8, rng=SeededRng(41))
    before = map_error(module, src, dst)
    result = train_stage_meanflow(
        src, dst, module, FitHyper(epochs=10, lr=2e-3, batch_size=32), SeededRng(42)
    )
    losses = [row[1] for row in result.history]
    first_avg = np.mean(losses[:3])
    last_avg = np.mean(losses[-3:])
    assert last_avg < first_avg
    after = map_error(module, src, dst)
    assert after < before


def test_stage4_training_covers_both_nets():
    src, dst = _toy_taps(50, c_out=6)
    module = MeanFlowModule(4, (4, 8, 8), (6, 4, 4), hidden=16, embed=8, rng=SeededRng(51))
    w3_before = [net.w3.data.copy() for net in module.nets]
    train_stage_meanflow(src, dst, module, FitHyper(epochs=2, lr=2e-3, batch_size=32), SeededRng(52))
    for net, before in zip(module.nets, w3_before):
        assert not np.array_equal(net.w3.data, before)
