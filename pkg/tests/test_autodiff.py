import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdmim import autodiff as ad
from sdmim.autodiff import Tensor, backward, no_grad
from sdmim.errors import ContractError, ShapeError
from sdmim.gradcheck import TOL_PRIMITIVE, check_fn, primitive_checks


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=grad)


# -- forward values ---------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(t([[1, 0], [0, 1]]), t([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_row_times_column():
    out = ad.matmul(t([[1, 2]]), t([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 2))))


def test_softmax_symmetry():
    np.testing.assert_allclose(ad.softmax(t([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_no_overflow():
    out = ad.softmax(t([1000.0, 1000.0]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_hand_value():
    out = ad.softmax(t([np.log(1.0), np.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-7)


def test_layer_norm_two_values():
    x = t([[2.0, 4.0]])
    out = ad.layer_norm(x, t([1.0, 1.0]), t([0.0, 0.0]), 1e-10)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_constant_token_guarded_by_eps():
    x = t([[5.0, 5.0, 5.0]])
    out = ad.layer_norm(x, t([1.0, 1.0, 1.0]), t([0.0, 0.0, 0.0]), 1e-5)
    np.testing.assert_allclose(out.data, [[0.0, 0.0, 0.0]])


def test_gelu_zero_and_asymptote():
    assert ad.gelu(t([0.0])).data[0] == 0.0
    big = ad.gelu(t([8.0])).data[0]
    assert abs(big - 8.0) < 1e-4


def test_l2_normalize_345():
    np.testing.assert_allclose(ad.l2_normalize(t([[3.0, 4.0]]), 1e-6).data, [[0.6, 0.8]], atol=1e-7)


def test_l2_normalize_zero_row_eps_guard():
    out = ad.l2_normalize(t([[0.0, 0.0]]), 1e-6)
    np.testing.assert_array_equal(out.data, [[0.0, 0.0]])


# -- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = t([1.0, 2.0, 3.0], grad=True)
    backward(ad.reduce_sum(w))
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_sum_of_squares():
    w = t([1.0, 2.0], grad=True)
    backward(ad.reduce_sum(ad.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_rejects_nonscalar():
    w = t([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        backward(ad.mul(w, w))


def test_backward_rejects_unrecorded():
    with pytest.raises(ContractError):
        backward(t([1.0]))


def test_gradients_accumulate_across_fanout():
    w = t([1.0, 2.0], grad=True)
    y = ad.add(ad.mul(w, w), ad.mul(w, w))
    backward(ad.reduce_sum(y))
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])


def test_shared_subexpression_equals_sum_of_paths():
    v = np.array([0.3, -1.2, 2.0], dtype=np.float32)
    shared = t(v, grad=True)
    backward(ad.reduce_sum(ad.mul(shared, shared)))
    a, b = t(v, grad=True), t(v, grad=True)
    backward(ad.reduce_sum(ad.mul(a, b)))
    np.testing.assert_array_equal(shared.grad, a.grad + b.grad)


def test_rebuilt_graph_gives_bit_identical_grads():
    rng = np.random.default_rng(0)
    xv = rng.uniform(-2, 2, size=(5, 4)).astype(np.float32)
    wv = rng.uniform(-2, 2, size=(4, 3)).astype(np.float32)

    def run():
        x, w = t(xv, grad=True), t(wv, grad=True)
        backward(ad.reduce_mean(ad.gelu(ad.matmul(x, w))))
        return x.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    assert (g1[0] == g2[0]).all() and (g1[1] == g2[1]).all()


def test_no_grad_suppresses_recording():
    w = t([1.0], grad=True)
    with no_grad():
        y = ad.mul(w, w)
    assert not y.requires_grad and y._backward is None


def test_detach_cuts_graph():
    w = t([2.0], grad=True)
    y = ad.mul(w, w).detach()
    assert not y.requires_grad
    z = ad.reduce_sum(ad.mul(y, t([3.0], grad=True)))
    backward(z)
    assert w.grad is None


def test_zero_grad_between_steps():
    w = t([1.0], grad=True)
    backward(ad.reduce_sum(ad.mul(w, w)))
    first = w.grad.copy()
    backward(ad.reduce_sum(ad.mul(w, w)))
    np.testing.assert_array_equal(w.grad, 2 * first)  # accumulation contract
    w.zero_grad()
    backward(ad.reduce_sum(ad.mul(w, w)))
    np.testing.assert_array_equal(w.grad, first)


def test_gather_rows_grad_indicator():
    x = t(np.arange(12.0).reshape(4, 3), grad=True)
    backward(ad.reduce_sum(ad.gather_rows(x, [1, 3])))
    expect = np.zeros((4, 3), dtype=np.float32)
    expect[[1, 3]] = 1.0
    np.testing.assert_array_equal(x.grad, expect)


def test_gather_rows_out_of_range():
    with pytest.raises(ContractError):
        ad.gather_rows(t(np.zeros((3, 2))), [0, 3])


def test_gather_scatter_conserves_gradient_mass():
    rng = np.random.default_rng(1)
    x = t(rng.uniform(-1, 1, size=(6, 3)), grad=True)
    idx = np.array([0, 2, 2, 5, 1])
    r = t(rng.uniform(-1, 1, size=(5, 3)))
    out = ad.gather_rows(x, idx)
    backward(ad.reduce_sum(ad.mul(out, r)))
    assert np.isclose(x.grad.sum(), r.data.sum(), atol=1e-5)


# -- finite-difference oracle over every primitive --------------------------


def test_all_primitives_match_finite_differences():
    for name, err in primitive_checks().items():
        assert err <= TOL_PRIMITIVE, f"{name}: rel err {err:.3e} > {TOL_PRIMITIVE}"


def test_matmul_sum_grad_matches_finite_differences_3x3():
    rng = np.random.default_rng(5)
    a0, b0 = rng.uniform(-2, 2, (3, 3)), rng.uniform(-2, 2, (3, 3))
    err = check_fn(lambda ls: ad.reduce_sum(ad.matmul(ls[0], ls[1])), [a0, b0])
    assert err <= TOL_PRIMITIVE


# -- invariants -------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_are_distributions(row):
    out = ad.softmax(Tensor(np.asarray([row], dtype=np.float32))).data
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_l2_normalize_unit_rows(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(4, 6)).astype(np.float32)
    out = ad.l2_normalize(Tensor(x), 1e-6).data
    norms = np.sqrt((out * out).sum(axis=-1))
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)
