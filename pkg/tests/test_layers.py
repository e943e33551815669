import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import batch_norm_train, lstm_scalar_step, naive_conv2d, sigmoid
from smanet import ops
from smanet.layers import (
    ConvLSTM,
    ConvLstmConfig,
    ConvLSTMCell,
    ConvLstmState,
    MsdaConfig,
    MSDABlock,
    SEGate,
    msda_census,
)
from smanet.tensor import ConfigError, ShapeError, Tensor

EPS = 1e-5


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def zero_params(module):
    for p in module.named_parameters().values():
        p.data[...] = 0


# ---------------------------------------------------------------- MSDA

def test_msda_config_validation():
    with pytest.raises(ConfigError):
        MsdaConfig(2, 4, dilation_rates=(1, 2, 4))
    with pytest.raises(ConfigError):
        MsdaConfig(2, 6, se_reduction=4)
    with pytest.raises(ConfigError):
        MsdaConfig(2, 4, se_reduction=8)


def test_branch_names_follow_dot_paths():
    names = MSDABlock(MsdaConfig(2, 4), np.random.default_rng(0)).named_parameters()
    assert "branch2.depthwise.weight" in names
    assert "se.fc1.weight" in names and "pointwise.weight" in names


def test_zero_branch_weights_give_zero_outputs():
    block = MSDABlock(MsdaConfig(2, 4, 2), np.random.default_rng(0)).eval()
    for i in (1, 2, 3):
        getattr(block, f"branch{i}").depthwise.weight.data[...] = 0
    x = T(np.random.default_rng(1).uniform(0, 1, size=(2, 4, 5, 5)))
    for y in block.branches(x):
        assert not y.data.any()


def test_chained_branches_match_naive_composition():
    rng = np.random.default_rng(2)
    block = MSDABlock(MsdaConfig(1, 1, 1), rng).eval()
    kernels = [rng.uniform(-1, 1, size=(1, 1, 3, 3)) for _ in range(3)]
    for i, k in enumerate(kernels, start=1):
        getattr(block, f"branch{i}").depthwise.weight.data[...] = k
    x = rng.uniform(0, 1, size=(1, 1, 4, 4))
    y1, y2, y3 = block.branches(T(x))

    def f(i, z):  # eval BN with identity stats is a 1/sqrt(1+eps) scale
        d = i + 1
        return np.maximum(naive_conv2d(z, kernels[i], padding=d, dilation=d) / math.sqrt(1 + EPS), 0)

    r1 = f(0, x)
    r2 = f(1, x + r1)
    r3 = f(2, x + r2)
    np.testing.assert_allclose(y1.data, r1, atol=1e-6)
    np.testing.assert_allclose(y2.data, r2, atol=1e-6)
    np.testing.assert_allclose(y3.data, r3, atol=1e-6)


@pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (4, 4), (7, 2)])
def test_msda_preserves_spatial_size(h, w):
    block = MSDABlock(MsdaConfig(3, 4, 2), np.random.default_rng(3))
    x = T(np.random.default_rng(4).normal(size=(2, 3, h, w)))
    assert block(x).dims == (2, 4, h, w)
    for y in block.branches(block.pointwise_features(x)):
        assert y.dims == (2, 4, h, w)


def test_msda_zero_branches_and_se_gives_zero():
    block = MSDABlock(MsdaConfig(2, 4, 2), np.random.default_rng(5))
    for i in (1, 2, 3):
        getattr(block, f"branch{i}").depthwise.weight.data[...] = 0
    zero_params(block.se)
    out = block(T(np.random.default_rng(6).normal(size=(2, 2, 4, 4))))
    assert not out.data.any()


def test_msda_block_matches_step_by_step_oracle():
    rng = np.random.default_rng(7)
    block = MSDABlock(MsdaConfig(1, 2, 1), rng)
    params = {n: p.data.astype(np.float64) for n, p in block.named_parameters().items()}
    for n, p in block.named_parameters().items():
        new = rng.uniform(-0.5, 0.5, size=p.dims) if not n.endswith("gamma") else rng.uniform(0.5, 1.5, p.dims)
        p.data[...] = new
        params[n] = p.data.astype(np.float64)
    x = rng.uniform(0, 1, size=(1, 1, 4, 4))
    out = block(T(x)).data

    xm = np.maximum(batch_norm_train(naive_conv2d(x, params["pointwise.weight"]),
                                     params["pointwise_bn.gamma"], params["pointwise_bn.beta"]), 0)
    ys, prev = [], None
    for d in (1, 2, 3):
        z = xm if prev is None else xm + prev
        conv = naive_conv2d(z, params[f"branch{d}.depthwise.weight"], padding=d, dilation=d, groups=2)
        prev = np.maximum(batch_norm_train(conv, params[f"branch{d}.bn.gamma"], params[f"branch{d}.bn.beta"]), 0)
        ys.append(prev)
    u = ys[0] + ys[1] + ys[2]
    pooled = u.mean(axis=(2, 3))
    hid = np.maximum(pooled @ params["se.fc1.weight"].T + params["se.fc1.bias"], 0)
    s = sigmoid(hid @ params["se.fc2.weight"].T + params["se.fc2.bias"])
    np.testing.assert_allclose(out, u * s[:, :, None, None], atol=1e-5)


def test_msda_rejects_wrong_channel_count():
    block = MSDABlock(MsdaConfig(2, 4), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        block(T(np.zeros((1, 3, 4, 4))))


# ---------------------------------------------------------------- SE gate

def test_se_zero_params_halves_input():
    se = SEGate(4, 2, np.random.default_rng(0))
    zero_params(se)
    u = np.random.default_rng(1).normal(size=(2, 4, 3, 3))
    np.testing.assert_allclose(se(T(u)).data, 0.5 * u, rtol=1e-6)


def test_se_saturated_bias_passes_input():
    se = SEGate(4, 2, np.random.default_rng(0))
    zero_params(se)
    se.fc2.bias.data[...] = 20.0
    u = T(np.random.default_rng(2).normal(size=(2, 4, 3, 3)))
    s = se.scales(u).data
    assert np.all(np.abs(s - 1) < 1e-6)
    np.testing.assert_allclose(se(u).data, u.data, atol=1e-6 * np.abs(u.data).max())


def test_se_hand_computation():
    se = SEGate(2, 1, np.random.default_rng(0))
    se.fc1.weight.data[...] = [[0.5, -1.0], [1.0, 0.25]]
    se.fc1.bias.data[...] = [0.1, -0.2]
    se.fc2.weight.data[...] = [[1.0, 2.0], [-1.0, 0.5]]
    se.fc2.bias.data[...] = [0.0, 0.3]
    u = np.empty((1, 2, 3, 3))
    u[0, 0], u[0, 1] = 2.0, -1.0  # constant channels, so GAP = (2, -1)
    h1 = max(0.5 * 2 - 1.0 * -1 + 0.1, 0)  # 2.1
    h2 = max(1.0 * 2 + 0.25 * -1 - 0.2, 0)  # 1.55
    s1 = 1 / (1 + math.exp(-(h1 + 2 * h2)))
    s2 = 1 / (1 + math.exp(-(-h1 + 0.5 * h2 + 0.3)))
    out = se(T(u)).data
    np.testing.assert_allclose(out[0, 0], 2.0 * s1, rtol=1e-6)
    np.testing.assert_allclose(out[0, 1], -1.0 * s2, rtol=1e-6)


def test_se_reduction_must_divide():
    with pytest.raises(ConfigError):
        SEGate(6, 4, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_se_scales_lie_strictly_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    se = SEGate(4, 2, rng)
    s = se.scales(T(rng.normal(size=(3, 4, 2, 2)))).data
    assert ((s > 0) & (s < 1)).all()


# ---------------------------------------------------------------- ConvLSTM

def test_convlstm_zero_params_zero_state():
    cell = ConvLSTMCell(2, 3, 3, np.random.default_rng(0))
    zero_params(cell)
    x = T(np.random.default_rng(1).normal(size=(1, 2, 4, 4)))
    st = cell.step(x, cell.initial_state(x))
    assert not st.hidden.data.any() and not st.cell.data.any()
    z = cell.gates(ops.concat([x, cell.initial_state(x).hidden], axis=1)).data
    assert not z.any()  # i=f=o=sigmoid(0)=0.5, g=tanh(0)=0


def test_convlstm_forget_saturation_keeps_memory():
    cell = ConvLSTMCell(2, 3, 3, np.random.default_rng(0))
    zero_params(cell)
    cell.gates.bias.data[3:6] = 20.0
    rng = np.random.default_rng(1)
    x = T(rng.normal(size=(1, 2, 4, 4)))
    c = rng.normal(size=(1, 3, 4, 4))
    st = cell.step(x, ConvLstmState(T(np.zeros((1, 3, 4, 4))), T(c)))
    np.testing.assert_allclose(st.cell.data, c, atol=1e-6)


def test_forget_bias_initialised_to_one():
    cell = ConvLSTMCell(2, 3, 3, np.random.default_rng(0))
    b = cell.gates.bias.data
    np.testing.assert_array_equal(b[3:6], 1.0)
    assert not b[:3].any() and not b[6:].any()


GATES = "ifog"


def _hand_set_cell(rng):
    cell = ConvLSTMCell(1, 1, 1, rng)
    w = rng.uniform(-1, 1, size=(4, 2))
    b = rng.uniform(-0.5, 0.5, size=4)
    cell.gates.weight.data[...] = w.reshape(4, 2, 1, 1)
    cell.gates.bias.data[...] = b
    w32 = cell.gates.weight.data[:, :, 0, 0].astype(np.float64)
    b32 = cell.gates.bias.data.astype(np.float64)
    wx = {g: w32[k, 0] for k, g in enumerate(GATES)}
    wh = {g: w32[k, 1] for k, g in enumerate(GATES)}
    bias = {g: b32[k] for k, g in enumerate(GATES)}
    return cell, wx, wh, bias


def test_convlstm_step_matches_scalar_lstm():
    rng = np.random.default_rng(11)
    cell, wx, wh, bias = _hand_set_cell(rng)
    x = rng.uniform(-1, 1, size=(1, 1, 2, 2)).astype(np.float32)
    h = rng.uniform(-1, 1, size=(1, 1, 2, 2)).astype(np.float32)
    c = rng.uniform(-1, 1, size=(1, 1, 2, 2)).astype(np.float32)
    st = cell.step(T(x), ConvLstmState(T(h), T(c)))
    for idx in np.ndindex(2, 2):
        i, j = idx
        h_ref, c_ref = lstm_scalar_step(float(x[0, 0, i, j]), float(h[0, 0, i, j]), float(c[0, 0, i, j]),
                                        wx, wh, bias)
        assert abs(st.hidden.data[0, 0, i, j] - h_ref) < 1e-6
        assert abs(st.cell.data[0, 0, i, j] - c_ref) < 1e-6


def test_convlstm_unroll_matches_chained_scalar_steps():
    rng = np.random.default_rng(12)
    stack = ConvLSTM(ConvLstmConfig(1, 1, 1, 2), rng)
    layers = []
    for cell in stack.cells():
        _, wx, wh, bias = _hand_set_cell(rng)
        cell.gates.weight.data[:, 0, 0, 0] = [wx[g] for g in GATES]
        cell.gates.weight.data[:, 1, 0, 0] = [wh[g] for g in GATES]
        cell.gates.bias.data[...] = [bias[g] for g in GATES]
        layers.append((wx, wh, bias))
    xs = rng.uniform(-1, 1, size=3).astype(np.float32)
    hs = stack.unroll([T(np.full((1, 1, 1, 1), v)) for v in xs])
    seq = [float(v) for v in xs]
    for wx, wh, bias in layers:
        h = c = 0.0
        out = []
        for v in seq:
            h, c = lstm_scalar_step(v, h, c, wx, wh, bias)
            out.append(h)
        seq = out
    np.testing.assert_allclose([t.data.item() for t in hs], seq, atol=1e-6)


def test_unroll_single_step_equals_composed_cells():
    rng = np.random.default_rng(13)
    stack = ConvLSTM(ConvLstmConfig(2, 3, 3, 2), rng)
    x = T(rng.normal(size=(1, 2, 3, 3)))
    h = x
    for cell in stack.cells():
        h = cell.step(h, cell.initial_state(h)).hidden
    np.testing.assert_array_equal(stack.unroll([x])[0].data, h.data)


def test_unroll_zero_params_gives_zero_hidden():
    stack = ConvLSTM(ConvLstmConfig(2, 3, 3, 2), np.random.default_rng(0))
    zero_params(stack)
    rng = np.random.default_rng(1)
    for h in stack.unroll([T(rng.normal(size=(1, 2, 3, 3))) for _ in range(4)]):
        assert not h.data.any()


def test_unroll_rejects_empty_and_ragged():
    stack = ConvLSTM(ConvLstmConfig(2, 3, 3, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        stack.unroll([])
    with pytest.raises(ShapeError):
        stack.unroll([T(np.zeros((1, 2, 3, 3))), T(np.zeros((1, 2, 4, 4)))])


def test_state_shape_mismatch_rejected():
    cell = ConvLSTMCell(2, 3, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cell.step(T(np.zeros((1, 2, 4, 4))), ConvLstmState(T(np.zeros((1, 3, 3, 3))), T(np.zeros((1, 3, 3, 3)))))
    with pytest.raises(ShapeError):
        ConvLstmState(T(np.zeros((1, 3, 3, 3))), T(np.zeros((1, 3, 3, 2))))


def test_convlstm_kernel_must_be_odd():
    with pytest.raises(ConfigError):
        ConvLstmConfig(2, 3, 2, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 4.0))
def test_cell_growth_is_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    cell = ConvLSTMCell(2, 2, 3, rng)
    for p in cell.named_parameters().values():
        p.data[...] = rng.uniform(-scale, scale, size=p.dims)
    x = T(rng.normal(size=(1, 2, 3, 3)))
    c = rng.normal(scale=3, size=(1, 2, 3, 3))
    st = cell.step(x, ConvLstmState(T(rng.uniform(-1, 1, (1, 2, 3, 3))), T(c)))
    c32 = c.astype(np.float32)
    assert (np.abs(st.cell.data) <= np.abs(c32) + 1 + 1e-6).all()
    assert (np.abs(st.hidden.data) < 1).all()


def test_unroll_is_order_sensitive():
    rng = np.random.default_rng(21)
    stack = ConvLSTM(ConvLstmConfig(2, 4, 3, 2), rng)
    seq = [T(rng.normal(size=(1, 2, 3, 3))) for _ in range(4)]
    forward = stack.unroll(seq)[-1].data
    backward = stack.unroll(seq[::-1])[-1].data
    assert np.abs(forward - backward).max() > 1e-3


# ---------------------------------------------------------------- census

@pytest.mark.parametrize("cin,c,r", [(1, 16, 4), (16, 32, 4), (32, 64, 4), (3, 6, 3)])
def test_msda_census_matches_instance(cin, c, r):
    cfg = MsdaConfig(cin, c, r)
    block = MSDABlock(cfg, np.random.default_rng(0))
    census = msda_census(cfg)
    assert census.total == block.parameter_count()
    for i in (1, 2, 3):
        assert getattr(block, f"branch{i}").depthwise.weight.size == census.branches[i - 1] == c * 9
    # a dense 3x3 branch would need C^2*9 weights
    assert sum(census.branches) * c == 3 * c * c * 9
