"""Reverse-mode autodiff engine, Adam, and checkpoints."""

import numpy as np
import pytest

from scenegen import autodiff as ad
from scenegen import diagnostics


# -- masked log-softmax -----------------------------------------------------


def test_single_bit_mask_gives_logprob_zero():
    logits = ad.constant(np.array([[3.0, -1.0, 7.0]]))
    mask = np.array([[False, True, False]])
    out = ad.masked_log_softmax(logits, mask)
    assert out.value[0, 1] == 0.0


def test_uniform_logits_give_minus_log_k():
    logits = ad.constant(np.zeros((1, 5)))
    mask = np.array([[True, True, False, True, False]])
    out = ad.masked_log_softmax(logits, mask)
    assert np.allclose(out.value[0, [0, 1, 3]], -np.log(3))


def test_full_mask_equals_log_softmax():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6))
    out = ad.masked_log_softmax(ad.constant(x), np.ones((4, 6), dtype=bool))
    direct = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    assert np.allclose(out.value, direct)


def test_masked_entries_have_zero_gradient():
    rng = np.random.default_rng(1)
    logits = ad.parameter(rng.standard_normal((3, 5)))
    mask = rng.uniform(size=(3, 5)) > 0.5
    mask[:, 0] = True
    out = ad.masked_log_softmax(logits, mask)
    loss = ad.reduce_sum(ad.mul(out, ad.constant(mask.astype(float))))
    ad.backward(loss)
    assert (logits.grad[~mask] == 0).all()


def test_all_zero_mask_row_rejected():
    with pytest.raises(ad.AutodiffError):
        ad.masked_log_softmax(ad.constant(np.zeros((2, 3))),
                              np.array([[True, False, False],
                                        [False, False, False]]))


def test_shape_mismatches_rejected():
    with pytest.raises(ad.AutodiffError):
        ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))
    with pytest.raises(ad.AutodiffError):
        ad.mul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 4))))


# -- backward ---------------------------------------------------------------


def test_linear_loss_gradient():
    w = ad.parameter(np.ones((3, 2)))
    x = np.array([[2.0], [5.0]])
    loss = ad.reduce_sum(ad.matmul(w, ad.constant(x)))
    ad.backward(loss)
    assert np.allclose(w.grad, np.tile(x.T, (3, 1)))


def test_constant_gets_no_gradient_flow():
    c = ad.constant(np.ones(3))
    w = ad.parameter(np.ones(3))
    loss = ad.reduce_sum(ad.mul(w, c))
    ad.backward(loss)
    assert not c.requires_grad and w.grad is not None


def test_backward_rejects_nonscalar():
    w = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ad.AutodiffError):
        ad.backward(ad.scale(w, 2.0))


def test_reused_node_accumulates_gradient():
    w = ad.parameter(np.array([3.0]))
    loss = ad.reduce_sum(ad.add(w, w))
    ad.backward(loss)
    assert np.allclose(w.grad, [2.0])


def test_all_op_gradients_match_finite_differences():
    results = dict(diagnostics.op_grad_checks(np.random.default_rng(7)))
    for name, err in results.items():
        assert err <= diagnostics.TOLERANCE, f"{name}: {err:.3e}"


# -- Adam -------------------------------------------------------------------


def test_first_adam_step_is_signed_lr():
    p = ad.parameter(np.array([1.0, -2.0]))
    opt = ad.Adam([p], lr=0.1)
    opt.zero_grad()
    p.grad = np.array([0.5, -3.0])
    opt.step()
    # bias-corrected first step moves by ~lr against the gradient sign
    assert np.allclose(p.value, [1.0 - 0.1, -2.0 + 0.1], atol=1e-6)


def test_zero_gradient_leaves_params():
    p = ad.parameter(np.array([1.0, 2.0]))
    opt = ad.Adam([p], lr=0.1)
    opt.zero_grad()
    opt.step()
    assert np.allclose(p.value, [1.0, 2.0])


def test_constant_gradient_moves_monotonically():
    p = ad.parameter(np.array([0.0]))
    opt = ad.Adam([p], lr=0.05)
    values = [0.0]
    for _ in range(5):
        opt.zero_grad()
        p.grad = np.array([1.0])
        opt.step()
        values.append(float(p.value[0]))
    assert all(b < a for a, b in zip(values, values[1:]))


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "model.npz"
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.zeros(3)}
    ad.save_checkpoint(path, arrays, meta={"tag": "x"})
    loaded, meta = ad.load_checkpoint(path, expected_shapes={"w": (2, 3), "b": (3,)})
    assert meta == {"tag": "x"}
    assert np.array_equal(loaded["w"], arrays["w"])


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    path = tmp_path / "model.npz"
    ad.save_checkpoint(path, {"w": np.zeros((2, 3))})
    with pytest.raises(ad.AutodiffError, match="shape mismatch"):
        ad.load_checkpoint(path, expected_shapes={"w": (3, 2)})


def test_checkpoint_missing_array_rejected(tmp_path):
    path = tmp_path / "model.npz"
    ad.save_checkpoint(path, {"w": np.zeros(2)})
    with pytest.raises(ad.AutodiffError, match="missing"):
        ad.load_checkpoint(path, expected_shapes={"b": (2,)})
