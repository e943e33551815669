import numpy as np
import pytest

from smanet import ops
from smanet.gradcheck import (
    CheckRow,
    format_table,
    grad_check,
    projection,
    relative_error,
    run_suite,
    suite_cases,
)
from smanet.tensor import BACKWARD_RULES, Tensor


@pytest.fixture(scope="module")
def rows():
    return run_suite(0)


def run_case(name, seed=0):
    for case_name, f, inputs, eps in suite_cases(seed):
        if case_name == name:
            return grad_check(f, inputs, eps)
    raise KeyError(name)


def test_suite_passes_everywhere(rows):
    failing = [(r.name, r.max_rel_error) for r in rows if not r.passed]
    assert failing == []


def test_suite_covers_primitives_and_blocks(rows):
    names = {r.name for r in rows}
    for required in ("fully_connected", "conv1d", "batch_norm_train", "softmax_cross_entropy",
                     "se_gate", "msda_block", "convlstm_step", "convlstm_unroll",
                     "weighted_ensemble", "full_model_loss_sv_backbone", "full_model_loss_sv_recurrent"):
        assert required in names
    assert any(n.startswith("conv2d") for n in names)


def test_table_is_stable_across_runs(rows):
    again = run_suite(0)
    assert [(r.name, r.max_rel_error) for r in rows] == [(r.name, r.max_rel_error) for r in again]
    text = format_table(rows)
    assert text.splitlines()[0].split() == ["check", "max_rel_error", "status"]
    assert len(text.splitlines()) == len(rows) + 1


@pytest.mark.parametrize("op, case", [("sigmoid", "sigmoid"), ("linear", "fully_connected"),
                                      ("batch_norm", "batch_norm_train")])
def test_sign_flip_in_backward_rule_is_caught(monkeypatch, op, case):
    original = BACKWARD_RULES[op]

    def flipped(node, g):
        return tuple(None if d is None else -d for d in original(node, g))

    monkeypatch.setitem(BACKWARD_RULES, op, flipped)
    row = CheckRow(case, run_case(case), 0.0)
    assert not row.passed
    assert format_table([row]).splitlines()[1].endswith("FAIL")


def test_relative_error_formula():
    a = np.array([1.0, 0.0, 1e-9, -2.0])
    n = np.array([1.1, 0.0, 0.0, 2.0])
    np.testing.assert_allclose(relative_error(a, n), [0.1 / 1.1, 0.0, 1e-9 / 1e-8, 2.0])


def test_fully_connected_example():
    rng = np.random.default_rng(0)
    x, w, b = (Tensor(rng.uniform(-1, 1, s)) for s in ((3, 4), (2, 4), (2,)))
    assert grad_check(lambda: projection(ops.linear(x, w, b)), [x, w, b]) < 1e-4


def test_dilated_conv_example():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 7, 7)))
    w = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))
    assert grad_check(lambda: projection(ops.conv2d(x, w, None, ops.ConvSpec(1, 2, 2, 1))), [x, w]) < 1e-4


def test_relu_away_from_kink():
    x = Tensor([[-0.7, -0.2, 0.3, 0.9]])
    assert grad_check(lambda: projection(ops.relu(x)), [x]) < 1e-4


def test_grad_check_restores_inputs():
    x = Tensor([[0.5, -0.25]])
    before = x.data.copy()
    grad_check(lambda: ops.sum(ops.mul(x, x)), [x])
    assert x.data.dtype == np.float32 and x.data.tobytes() == before.tobytes()
    assert x.grad is None and not x.requires_grad
