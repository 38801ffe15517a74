import threading

import numpy as np
import pytest

from riskgrid import autodiff as ad
from riskgrid.exceptions import ContractError, ShapeError

from oracles import central_difference, relative_error

SEEDS = range(20)


def _check(build, shapes, seed, tol=1e-4):
    """Compare tape gradients of ``sum(w * build(*params))`` with finite differences."""
    rng = np.random.default_rng(seed)
    params = [ad.Param(rng.normal(size=s)) for s in shapes]
    w = rng.normal(size=build(*params).shape)

    def loss():
        return float(np.sum(w * build(*params).data))

    with ad.Tape() as tape:
        out = ad.sum_all(ad.mul(build(*params), ad.Tensor(w)))
    tape.backward(out)
    numeric = central_difference(loss, [p.data for p in params])
    for p, g in zip(params, numeric):
        assert relative_error(p.grad, g) < tol


PRIMITIVES = {
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(3, 4)]),
    "add_bias": (lambda a, b: ad.add_bias(a, b), [(5, 3), (3,)]),
    "mul_rowvec": (lambda a, r: ad.mul_rowvec(a, r), [(5, 3), (3,)]),
    "mul_colvec": (lambda a, c: ad.mul_colvec(a, c), [(5, 3), (5, 1)]),
    "relu": (lambda a: ad.relu(a), [(4, 5)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(4, 5)]),
    "square": (lambda a: ad.square(a), [(4, 5)]),
    "softmax": (lambda a: ad.softmax(a), [(4, 5)]),
    "log_softmax": (lambda a: ad.log_softmax(a), [(4, 5)]),
    "sum_all": (lambda a: ad.sum_all(a), [(4, 5)]),
    "mean": (lambda a: ad.mean(a), [(4, 5)]),
    "sum_cols": (lambda a: ad.sum_cols(a), [(4, 5)]),
    "reshape": (lambda a: ad.reshape(a, (10, 2)), [(4, 5)]),
    "concat_cols": (lambda a, b: ad.concat_cols([a, b, a]), [(4, 2), (4, 3)]),
    "take_cols": (lambda a: ad.take_cols(a, [2, 0, 2]), [(4, 5)]),
    "take_rows": (lambda a: ad.take_rows(a, [1, 1, 3, 0]), [(4, 5)]),
    "softmax_ce": (lambda a: ad.softmax_cross_entropy(a, np.array([0, 3, 1, 1])),
                   [(4, 4)]),
    "sigmoid_bce": (lambda a: ad.sigmoid_binary_cross_entropy(
        a, np.array([0.0, 1.0, 1.0, 0.0])), [(4, 1)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    build, shapes = PRIMITIVES[name]
    for seed in SEEDS:
        _check(build, shapes, seed)


def test_chain_with_shared_subexpression():
    def build(a, b):
        h = ad.relu(ad.matmul(a, b))
        return ad.add(ad.mul(h, h), ad.sigmoid(h))
    for seed in SEEDS:
        _check(build, [(3, 4), (4, 5)], seed)


def test_relu_subgradient_at_zero_is_zero():
    p = ad.Param(np.array([[0.0, 1.0, -1.0]]))
    with ad.Tape() as tape:
        out = ad.sum_all(ad.relu(p))
    tape.backward(out)
    np.testing.assert_array_equal(p.grad, [[0.0, 1.0, 0.0]])


def test_gradients_accumulate_across_backward_calls():
    p = ad.Param(np.ones((2, 2)))
    for _ in range(2):
        with ad.Tape() as tape:
            out = ad.sum_all(ad.scale(p, 3.0))
        tape.backward(out)
    np.testing.assert_array_equal(p.grad, np.full((2, 2), 6.0))
    p.zero_grad()
    assert not p.grad.any()


def test_softmax_is_shift_invariant_and_stable():
    z = np.array([[1000.0, 1001.0, 999.0]])
    out = ad.softmax(ad.Tensor(z)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, ad.softmax(ad.Tensor(z - 1000)).data)
    np.testing.assert_allclose(out.sum(), 1.0)


def test_fused_losses_stay_finite_for_extreme_logits():
    ce = ad.softmax_cross_entropy(ad.Tensor([[800.0, -800.0]]), np.array([1]))
    bce = ad.sigmoid_binary_cross_entropy(ad.Tensor([[-900.0]]), np.array([1.0]))
    assert np.isfinite(ce.data).all() and np.isfinite(bce.data).all()
    np.testing.assert_allclose(ce.data, [1600.0])
    np.testing.assert_allclose(bce.data, [900.0])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))


def test_backward_rejects_non_scalar_and_foreign_losses():
    p = ad.Param(np.ones((2, 2)))
    with ad.Tape() as tape:
        out = ad.scale(p, 2.0)
    with pytest.raises(ContractError):
        tape.backward(out)
    with ad.Tape():
        loss = ad.sum_all(p)
    with pytest.raises(ContractError):
        tape.backward(loss)
    with pytest.raises(ContractError):
        ad.backward(ad.Tensor(1.0))


def test_no_recording_without_tape():
    p = ad.Param(np.ones(3))
    out = ad.scale(p, 2.0)
    assert out.tape is None


def test_tapes_are_thread_local():
    p = ad.Param(np.ones((1, 2)))
    seen = {}

    def worker():
        seen["tape"] = ad.scale(p, 1.0).tape

    with ad.Tape() as tape:
        th = threading.Thread(target=worker)
        th.start()
        th.join()
        mine = ad.scale(p, 1.0)
    assert seen["tape"] is None
    assert mine.tape is tape
