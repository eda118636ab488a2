import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bdspectrum import engine as E
from bdspectrum.engine import Tensor

from conftest import model_loss_fn, small_instance


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_elementary_examples():
    np.testing.assert_array_equal(E.relu(Tensor([[-1.0, 0.0, 2.0]])).data, [[0, 0, 2]])
    np.testing.assert_array_equal(E.mean_rows(Tensor(np.full((2, 3), 4.0))).data, [4, 4, 4])
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(E.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    np.testing.assert_array_equal(E.scale(Tensor(x), 2.0).data, 2 * x)
    np.testing.assert_array_equal(E.concat_rows([Tensor(x), Tensor(x)]).data, np.vstack([x, x]))
    np.testing.assert_array_equal(E.concat_cols([Tensor(x), Tensor(x)]).data, np.hstack([x, x]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_shape_mismatch_and_nonfinite():
    with pytest.raises(ValueError):
        E.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        E.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(E.NonFiniteError):
        E.scale(Tensor([[1e308]]), 1e10)


def test_linear_gradient():
    x = leaf(np.random.default_rng(1).normal(size=(2, 3)))
    loss = E.total(E.scale(x, 3.0))
    E.backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 3.0))


def test_dead_relu_gradient():
    x = leaf([[-1.0, -2.0, 0.5]])
    E.backward(E.total(E.relu(x)))
    np.testing.assert_array_equal(x.grad, [[0, 0, 1]])


def test_backward_twice_raises():
    x = leaf([[1.0, 2.0]])
    loss = E.total(E.relu(x))
    E.backward(loss)
    with pytest.raises(E.GraphConsumedError):
        E.backward(loss)


def test_backward_needs_scalar_or_seed():
    x = leaf([[1.0, 2.0]])
    with pytest.raises(ValueError):
        E.backward(E.relu(x))


def test_leaf_gradients_accumulate():
    x = leaf([[1.0, 2.0]])
    E.backward(E.total(x))
    E.backward(E.total(x))
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


def test_shared_subexpression_gradient():
    # loss = sum(x @ w + x @ w) uses x twice
    x, w = leaf(np.eye(2)), leaf([[1.0], [2.0]])
    y = E.matmul(x, w)
    E.backward(E.total(E.add(y, y)))
    np.testing.assert_array_equal(w.grad, [[2.0], [2.0]])


def test_batched_matmul_unbroadcasts():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(4, 3, 3)))
    w = leaf(rng.normal(size=(3, 2)))
    E.backward(E.total(E.matmul(a, w)))
    expected = np.einsum("bij,bik->jk", a.data, np.ones((4, 3, 2)))
    np.testing.assert_allclose(w.grad, expected)


# -- finite difference oracle --------------------------------------------------

def test_finite_diff_quadratic():
    x = leaf([1.0, 2.0])
    err = E.finite_diff_check(lambda: float((x.data ** 2).sum()), x, np.array([2.0, 4.0]))
    assert err < 1e-8


def test_finite_diff_linear():
    x = leaf([1.0, -2.0, 3.0])
    c = np.array([0.5, 2.0, -1.0])
    err = E.finite_diff_check(lambda: float(c @ x.data), x, c)
    assert err < 1e-10


def test_finite_diff_detects_wrong_gradient():
    x = leaf([1.0, 2.0])
    err = E.finite_diff_check(lambda: float((x.data ** 2).sum()), x, np.array([2.0, 5.0]))
    assert err > 0.1


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-2, 2)), st.integers(0, 1000))
def test_ops_pass_gradient_check(x0, seed):
    rng = np.random.default_rng(seed)
    # a random spread avoids degenerate batches
    x0 = x0 + rng.normal(0.0, 0.5, size=(4, 3))
    w0 = rng.normal(size=(3, 2))
    # stay clear of ReLU kinks, which batchnorm would amplify
    assume(np.abs(x0 @ w0).min() > 0.05)
    x = leaf(x0)
    w = leaf(w0)
    gamma, beta = leaf(rng.uniform(0.5, 1.5, 4)), leaf(rng.normal(size=4))
    mask = rng.integers(0, 2, size=(4, 4)).astype(float)
    proj = Tensor(rng.normal(size=(4, 2)))
    labels = np.array([0, 1, 1, 0])

    def loss():
        h = E.relu(E.matmul(x, w))
        z = E.add(E.scale(h, 0.5), E.matmul(x, w))
        z = E.multiply_const(E.concat_cols([z, E.take_rows(h, np.array([1, 0, 3, 2]))]), mask)
        z = E.batchnorm(z, gamma, beta, np.zeros(4), np.ones(4), train=True, update_stats=False)
        ce, _ = E.softmax_crossentropy(E.matmul(z, proj), labels, [1.0, 2.0])
        # a path around batchnorm, which alone leaves the loss invariant to the scale of w's columns
        return E.add(ce, E.scale(E.total(h), 0.1))

    errs = E.gradient_check(loss, {"x": x, "w": w, "gamma": gamma, "beta": beta})
    assert max(errs.values()) < 1e-4


def test_mean_take_concat_gradients():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(5, 3)))

    def loss():
        a = E.take_rows(x, np.array([0, 2, 2, 4]))
        b = E.concat_rows([a, x])
        return E.total(E.relu(E.mean_rows(E.scale(b, 1.7))))

    errs = E.gradient_check(loss, {"x": x})
    assert errs["x"] < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient(seed):
    params, adj, labels, sites = small_instance(seed)
    errs = E.gradient_check(model_loss_fn(params, adj, labels, sites), params.tensors, max_coords=30,
                            rng=np.random.default_rng(seed))
    assert max(errs.values()) < 1e-4


# -- layers ---------------------------------------------------------------------

def test_batchnorm_examples():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(200, 3))
    x = (x - x.mean(0)) / x.std(0)
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = E.batchnorm(Tensor(x), one, zero, np.zeros(3), np.ones(3), train=True)
    np.testing.assert_allclose(out.data, x, atol=1e-4)
    out = E.batchnorm(Tensor(x), Tensor(np.zeros(3)), Tensor([1.0, 2.0, 3.0]), np.zeros(3), np.ones(3),
                      train=True)
    np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0], (200, 1)))


def test_batchnorm_running_stats_and_eval():
    x = np.array([[0.0], [2.0]])
    rm, rv = np.zeros(1), np.ones(1)
    E.batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), rm, rv, train=True)
    assert rm[0] == pytest.approx(0.1)
    # unbiased batch variance 2.0
    assert rv[0] == pytest.approx(0.9 + 0.2)
    a = E.batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), rm, rv, train=False).data
    b = E.batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), rm, rv, train=False).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, (x - 0.1) / np.sqrt(1.1 + E.BN_EPS))


def test_batchnorm_single_sample_train_errors():
    with pytest.raises(ValueError):
        E.batchnorm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), train=True)


def test_dropout_contract():
    x = Tensor(np.ones((400, 500)))
    assert E.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert E.dropout(x, 0.5, False) is x
    out = E.dropout(x, 0.3, True, np.random.default_rng(0)).data
    assert abs((out > 0).mean() - 0.7) < 0.02
    assert abs(out.mean() - 1.0) < 0.03
    with pytest.raises(ValueError):
        E.dropout(x, 1.0, True, np.random.default_rng(0))


def test_softmax_crossentropy_examples():
    loss, p = E.softmax_crossentropy(Tensor(np.zeros((3, 2))), [0, 1, 1])
    np.testing.assert_allclose(p, 0.5)
    assert float(loss.data) == pytest.approx(np.log(2))
    loss, _ = E.softmax_crossentropy(Tensor([[0.0, 800.0]]), [1])
    assert float(loss.data) < 1e-12
    bad = Tensor(np.zeros((1, 2)))
    bad.data[0, 0] = np.nan
    with pytest.raises(E.NonFiniteError):
        E.softmax_crossentropy(bad, [0])


def test_weighted_crossentropy():
    logits = Tensor(np.zeros((2, 2)))
    loss, _ = E.softmax_crossentropy(logits, [0, 1], [1.0, 3.0])
    assert float(loss.data) == pytest.approx(2 * np.log(2))
    with pytest.raises(ValueError):
        E.softmax_crossentropy(logits, [0, 1], [0.0, 1.0])


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300])}
    E.save_checkpoint(tmp_path / "x.ckpt", arrays, {"k": 1})
    back, meta = E.load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": 1}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    E.save_checkpoint(tmp_path / "y.ckpt", back, {"k": 1})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        E.load_checkpoint(tmp_path / "bad")
