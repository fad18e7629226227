import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pointtpa import autodiff as ad


def test_softmax_examples():
    out = ad.softmax_rows(ad.tensor([[0.0, 0.0]]), temperature=4.0)
    assert out.tolist() == [[0.5, 0.5]]
    big = ad.softmax_rows(ad.tensor([[1000.0, 0.0]]))
    assert torch.isfinite(big).all()
    assert big[0, 0].item() == pytest.approx(1.0)


def test_softmax_rejects_non_positive_temperature():
    with pytest.raises(ValueError):
        ad.softmax_rows(ad.tensor([[1.0, 2.0]]), 0.0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=st.floats(-50, 50)), st.floats(0.1, 10))
def test_softmax_rows_are_distributions(z, tau):
    out = ad.softmax_rows(ad.tensor(z), tau).numpy()
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_relu_example():
    assert ad.relu(ad.tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(torch.zeros(2, 3, dtype=ad.DTYPE), torch.zeros(4, 2, dtype=ad.DTYPE))


def test_layernorm_matches_manual():
    x = ad.tensor(np.random.default_rng(0).normal(size=(5, 4)))
    g, b = ad.tensor([1.0, 2.0, 0.5, 1.0]), ad.tensor([0.0, 1.0, 0.0, -1.0])
    mu = x.mean(dim=1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=1, keepdim=True)
    ref = (x - mu) / torch.sqrt(var + 1e-5) * g + b
    assert torch.allclose(ad.layernorm(x, g, b), ref, atol=1e-12)


def test_masked_mean_and_empty_row():
    v = ad.tensor([[[1.0], [3.0], [100.0]], [[5.0], [7.0], [9.0]]])
    mask = torch.tensor([[True, True, False], [False, False, False]])
    assert ad.mean_rows_masked(v, mask).tolist() == [[2.0], [0.0]]


def test_gather_scatter_inverse():
    x = ad.tensor(np.arange(12.0).reshape(4, 3))
    perm = np.array([2, 0, 3, 1])
    assert torch.equal(ad.scatter_rows(ad.gather_rows(x, perm), perm), x)


def test_pad_rows():
    x = ad.tensor([[1.0, 2.0]])
    assert ad.pad_rows(x, 3, 9.0).tolist() == [[1.0, 2.0], [9.0, 9.0], [9.0, 9.0]]
    with pytest.raises(ValueError):
        ad.pad_rows(x, 0)


def test_backward_examples():
    w = torch.nn.Parameter(ad.tensor([[1.0, -2.0]]))
    x = ad.tensor([[3.0], [4.0]])
    loss = ad.sum_all(ad.relu(ad.matmul(x, w)))
    grads = ad.backward(loss, {"w": w})
    # d/dw sum(relu(x w)): only positive outputs (column 0) contribute, sum of x
    assert grads["w"].tolist() == [[7.0, 0.0]]


def test_backward_rejects_non_scalar():
    w = torch.nn.Parameter(ad.tensor([1.0, 2.0]))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(w * 2, {"w": w})


def test_backward_frozen_params_get_zero():
    a = torch.nn.Parameter(ad.tensor([1.0, 2.0]))
    b = torch.nn.Parameter(ad.tensor([3.0]), requires_grad=False)
    unused = torch.nn.Parameter(ad.tensor([5.0]))
    grads = ad.backward(ad.sum_all(a * b), {"a": a, "b": b, "u": unused})
    assert grads["a"].tolist() == [3.0, 3.0]
    assert grads["b"].tolist() == [0.0]
    assert grads["u"].tolist() == [0.0]


def test_backward_nan_loss_raises():
    a = torch.nn.Parameter(ad.tensor([1.0]))
    with pytest.raises(ad.NumericalError):
        ad.backward(ad.sum_all(a * float("nan")), {"a": a})


def test_finite_difference_of_matmul_sum():
    rng = np.random.default_rng(1)
    a = torch.nn.Parameter(ad.tensor(rng.normal(size=(3, 4))))
    b = ad.tensor(rng.normal(size=(4, 2)))
    fd = ad.finite_difference(lambda: ad.sum_all(ad.matmul(a, b)), a)
    exact = np.tile(b.numpy().sum(axis=1), (3, 1))
    assert ad.relative_error(exact, fd).max() < 1e-4
    analytic = ad.backward(ad.sum_all(ad.matmul(a, b)), {"a": a})["a"].numpy()
    np.testing.assert_allclose(analytic, exact, atol=1e-12)


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([0.0])).tolist() == [0.0]
    assert ad.relative_error(np.array([1.0]), np.array([0.5])).tolist() == [0.5]


def test_gradcheck_passes_on_smooth_loss_and_catches_wrong_gradient():
    rng = np.random.default_rng(2)
    w = torch.nn.Parameter(ad.tensor(rng.normal(size=(4, 3))))
    x = ad.tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 3, size=6)
    report = ad.gradcheck(lambda: ad.cross_entropy(ad.matmul(x, w), labels), {"w": w})
    assert report.passed, report.table()

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return t**2

        @staticmethod
        def backward(ctx, g):
            return g * 3.0

    bad = ad.gradcheck(lambda: ad.sum_all(Wrong.apply(w)), {"w": w})
    assert bad.failures == ["w"]


def test_fd_step_doubling_agrees():
    # central differences are O(h^2): halving h must not move the estimate
    w = torch.nn.Parameter(ad.tensor([[0.3, -0.7], [1.1, 0.2]]))

    def loss():
        return ad.sum_all(torch.tanh(ad.matmul(w, w)) ** 2)

    analytic = ad.backward(loss(), {"w": w})["w"].numpy()
    for h in (1e-3, 1e-4, 1e-5):
        fine, coarse = ad.finite_difference(loss, w, h), ad.finite_difference(loss, w, 2 * h)
        assert np.abs(fine - coarse).max() < 10 * (2 * h) ** 2 + 1e-8
        assert ad.relative_error(analytic, fine).max() < 1e-4


def test_sgd_momentum_and_frozen():
    p = torch.nn.Parameter(ad.tensor([1.0]))
    q = torch.nn.Parameter(ad.tensor([1.0]), requires_grad=False)
    opt = ad.SGD({"p": p, "q": q}, lr=0.1, momentum=0.5)
    g = {"p": ad.tensor([1.0]), "q": ad.tensor([1.0])}
    opt.step(g)
    opt.step(g)
    # velocity 1 then 1.5
    assert p.item() == pytest.approx(1.0 - 0.1 - 0.15)
    assert q.item() == 1.0


ENTRIES = [("a.weight", np.arange(6.0).reshape(2, 3), True), ("b", np.array(2.5), False), ("empty", np.zeros((0, 4)), True)]


def test_checkpoint_round_trip():
    blob = ad.encode_checkpoint(ENTRIES)
    assert blob[:4] == b"PTPK"
    out = ad.decode_checkpoint(blob)
    assert list(out) == ["a.weight", "b", "empty"]
    for name, arr, trainable in ENTRIES:
        assert np.array_equal(out[name].array, arr) and out[name].array.shape == arr.shape
        assert out[name].trainable == trainable
    assert ad.encode_checkpoint((n, e.array, e.trainable) for n, e in out.items()) == blob


def test_checkpoint_layout():
    blob = ad.encode_checkpoint([("w", np.array([1.0]), True)])
    expected = b"PTPK" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    expected += (1).to_bytes(4, "little") + b"w" + b"\x01" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    expected += np.array([1.0], dtype="<f8").tobytes()
    assert blob == expected


def test_checkpoint_errors_name_offset():
    blob = ad.encode_checkpoint(ENTRIES)
    with pytest.raises(ad.CheckpointError, match="offset 0"):
        ad.decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(ad.CheckpointError, match="offset"):
        ad.decode_checkpoint(blob[:-3])
    with pytest.raises(ad.CheckpointError, match="offset"):
        ad.decode_checkpoint(blob + b"\x00")


@settings(max_examples=30)
@given(st.lists(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=4))
def test_checkpoint_round_trip_property(arrays):
    entries = [(f"p{i}", a, i % 2 == 0) for i, a in enumerate(arrays)]
    out = ad.decode_checkpoint(ad.encode_checkpoint(entries))
    for name, a, t in entries:
        np.testing.assert_array_equal(out[name].array, a)
