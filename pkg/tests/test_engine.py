"""Tensor engine: ops, autodiff, optimizer, gradcheck, checkpoint codec."""

import numpy as np
import pytest

from cyclopep import engine
from cyclopep.engine import (OptimizerState, Tensor, adamw_step, checkpoint_bytes,
                             finite_difference_check, load_checkpoint, save_checkpoint)
from cyclopep.errors import ContractViolation, NumericError, TrainingDivergence


def test_softmax_uniform_on_equal_logits():
    out = engine.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-15)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = engine.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, np.eye(3) @ a)


def test_segment_sum_hand_example():
    # hand sum: [1+2, 3] into 2 buckets
    out = engine.segment_sum(Tensor([[1.0], [2.0], [3.0]]), np.array([0, 0, 1]), 2)
    np.testing.assert_allclose(out.data, [[3.0], [3.0]])


def test_segment_sum_permutation_invariant_within_segments():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(12, 4))
    seg = rng.integers(0, 3, size=12)
    base = engine.segment_sum(Tensor(vals), seg, 3).data
    for trial in range(10):
        perm = rng.permutation(12)
        shuffled = engine.segment_sum(Tensor(vals[perm]), seg[perm], 3).data
        np.testing.assert_allclose(shuffled, base, atol=1e-12)


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_sum_of_matrix_vector():
    a = Tensor(np.array([[2.0, -1.0], [0.5, 4.0]]), requires_grad=True)
    x = Tensor(np.array([[1.0], [1.0]]))
    engine.matmul(a, x).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((2, 2)))


def test_backward_constant_leaves_no_grad():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(5.0, requires_grad=True)
    (y * y).backward()
    assert x.grad is None


def test_backward_accumulates_across_calls():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad == pytest.approx(12.0)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        (x * x).backward()


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ContractViolation, match="matmul"):
        engine.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ContractViolation, match="concat"):
        engine.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))], axis=1)
    with pytest.raises(ContractViolation, match="gather_rows"):
        engine.gather_rows(Tensor(np.ones((2, 3))), np.array([0, 2]))
    with pytest.raises(ContractViolation, match="segment_sum"):
        engine.segment_sum(Tensor(np.ones((3, 1))), np.array([0, 0, 5]), 2)


def test_non_finite_results_raise_numeric_error():
    with pytest.raises(NumericError):
        engine.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(NumericError):
        engine.log(Tensor([-1.0]))


def _gradcheck_scalar(make_loss, params, tol=1e-5, epsilon=1e-5):
    err = finite_difference_check(make_loss, params, epsilon=epsilon)
    assert err < tol, f"gradcheck error {err}"


def test_gradients_match_central_differences_per_op():
    # every exposed op, random inputs, 64-bit
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    seg = np.array([0, 1, 1, 2])
    idx = np.array([2, 0, 3, 1, 2])
    params = {"a": a, "b": b, "w": w}

    cases = {
        "add": lambda: (engine.add(a, b) * engine.add(a, b)).mean(),
        "sub": lambda: (engine.sub(a, b) * engine.sub(a, b)).mean(),
        "mul": lambda: engine.mul(a, b).mean(),
        "div": lambda: engine.div(a, engine.add(engine.mul(b, b), 2.0)).mean(),
        "neg": lambda: engine.neg(a).sum(),
        "matmul": lambda: engine.matmul(a, w).mean(),
        "concat": lambda: engine.concat([a, b], axis=1).mean(),
        "gather": lambda: (engine.gather_rows(a, idx) * engine.gather_rows(b, idx)).mean(),
        "segsum": lambda: (engine.segment_sum(a, seg, 3) * engine.segment_sum(b, seg, 3)).mean(),
        "silu": lambda: engine.silu(engine.mul(a, b)).mean(),
        "softmax": lambda: (engine.softmax(a, axis=-1) * b).mean(),
        "log": lambda: engine.log(engine.add(engine.mul(a, a), 1.5)).mean(),
        "l2norm": lambda: engine.l2_norm(engine.sub(a, b)).mean(),
        "sum_axis": lambda: (engine.sum_(a, axis=0) * engine.sum_(b, axis=0)).sum(),
    }
    for name, make_loss in cases.items():
        _gradcheck_scalar(make_loss, params)


def test_finite_difference_check_quadratic_and_linear():
    x = Tensor(2.0, requires_grad=True)
    assert finite_difference_check(lambda: x * x, {"x": x}, epsilon=1e-5) < 1e-8
    y = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    assert finite_difference_check(lambda: (y * 3.0).sum(), {"y": y}, epsilon=1e-5) < 1e-9


def test_finite_difference_check_rejects_bad_epsilon():
    x = Tensor(1.0, requires_grad=True)
    with pytest.raises(ContractViolation):
        finite_difference_check(lambda: x * x, {"x": x}, epsilon=1e-2)


def test_adamw_defaults():
    state = OptimizerState()
    assert (state.learning_rate, state.beta1, state.beta2, state.weight_decay) == \
        (1e-4, 0.9, 0.999, 0.01)


def test_adamw_zero_grad_zero_decay_is_identity():
    state = OptimizerState(weight_decay=0.0)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    before = p.data.copy()
    adamw_step(state, {"p": p}, {"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, before)


def test_adamw_hand_step():
    # p=1, g=1, wd=0, step 1: p - lr * mhat / (sqrt(vhat) + eps) ~ 0.9999
    state = OptimizerState(weight_decay=0.0)
    p = Tensor(np.array(1.0), requires_grad=True)
    adamw_step(state, {"p": p}, {"p": np.array(1.0)})
    assert p.data == pytest.approx(1.0 - 1e-4, abs=1e-8)
    assert state.step_count == 1


def test_adamw_decay_is_decoupled():
    # zero gradients, wd>0: pure shrink by lr*wd, moments untouched
    state = OptimizerState(weight_decay=0.5)
    p = Tensor(np.array([2.0]), requires_grad=True)
    adamw_step(state, {"p": p}, {"p": np.zeros(1)})
    np.testing.assert_allclose(p.data, [2.0 * (1.0 - 1e-4 * 0.5)])
    np.testing.assert_array_equal(state.first_moment["p"], [0.0])


def test_adamw_wd_zero_matches_moment_update_alone():
    rng = np.random.default_rng(11)
    g = rng.normal(size=(3,))
    p0 = rng.normal(size=(3,))
    with_wd = Tensor(p0.copy(), requires_grad=True)
    no_wd = Tensor(p0.copy(), requires_grad=True)
    adamw_step(OptimizerState(weight_decay=0.0), {"p": no_wd}, {"p": g})
    adamw_step(OptimizerState(weight_decay=0.3), {"p": with_wd}, {"p": g})
    np.testing.assert_allclose(with_wd.data, no_wd.data - 1e-4 * 0.3 * p0, atol=1e-15)


def test_adamw_nan_gradient_diverges():
    state = OptimizerState()
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(TrainingDivergence):
        adamw_step(state, {"p": p}, {"p": np.array([np.nan])})


def test_optimizer_state_validation():
    with pytest.raises(ContractViolation):
        OptimizerState(learning_rate=0.0)
    with pytest.raises(ContractViolation):
        OptimizerState(beta1=1.0)
    with pytest.raises(ContractViolation):
        OptimizerState(weight_decay=-0.1)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "layer0.w": rng.normal(size=(4, 7)),
        "layer0.b": rng.normal(size=(7,)),
        "scalar": np.array(3.25),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], np.asarray(tensors[name], dtype=np.float64))
        assert loaded[name].shape == np.asarray(tensors[name]).shape


def test_checkpoint_bytes_deterministic_and_magic():
    tensors = {"b": np.ones(2), "a": np.zeros((1, 2))}
    blob = checkpoint_bytes(tensors)
    assert blob[:4] == engine.CHECKPOINT_MAGIC
    assert blob[4] == engine.CHECKPOINT_VERSION
    assert blob == checkpoint_bytes(dict(reversed(list(tensors.items()))))


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": np.ones((2, 2))})
    blob = path.read_bytes()
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[:-5])
    with pytest.raises(ContractViolation, match="truncated"):
        load_checkpoint(truncated)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ContractViolation, match="magic"):
        load_checkpoint(bad)
