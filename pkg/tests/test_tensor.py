import numpy as np
import pytest

from cafbifpn.errors import GraphError, NumericError, ShapeError
from cafbifpn.tensor import (
    SplitMix64,
    Tape,
    Tensor,
    add,
    concat_axis,
    matmul,
    mul,
    named_tensors,
    permute,
    reduce_mean_axis,
    relu,
    reshape,
    slice_axis,
    softmax_lastdim,
    structural,
    sum_all,
    transpose,
)


def test_tensor_is_immutable() -> None:
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0
    copy = t.numpy()
    copy[0, 0] = 5.0
    assert t.data[0, 0] == 1.0


@pytest.mark.parametrize("data", [np.float64(1.0), np.zeros((0, 3)), np.zeros((2, 0))])
def test_tensor_rejects_empty_dims(data: np.ndarray) -> None:
    with pytest.raises(ShapeError):
        Tensor(data)


def test_elementwise_shape_mismatch_names_both_dims() -> None:
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[3, 2\]"):
        add(Tensor.ones([2, 3]), Tensor.ones([3, 2]))


def test_matmul_and_transpose() -> None:
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.5], [-1.0]])
    assert np.array_equal(matmul(a, b).data, [[-1.5], [-2.5]])
    assert np.array_equal(transpose(a).data, [[1.0, 3.0], [2.0, 4.0]])


def test_softmax_rows() -> None:
    y = softmax_lastdim(Tensor([[0.0, 0.0], [1000.0, 0.0]])).data
    assert np.allclose(y[0], [0.5, 0.5])
    assert np.allclose(y.sum(axis=-1), 1.0)
    with pytest.raises(NumericError):
        softmax_lastdim(Tensor([[np.inf, 0.0]]))


def test_structural_ops() -> None:
    t = Tensor(np.arange(24.0).reshape(2, 3, 4))
    assert structural("reshape", t, [6, 4]).dims == [6, 4]
    assert slice_axis(t, 2, 1, 3).dims == [2, 3, 2]
    assert concat_axis([t, t], 0).dims == [4, 3, 4]
    assert reduce_mean_axis(Tensor([1.0, 2.0, 3.0]), 0).dims == [1]
    with pytest.raises(ShapeError):
        reshape(t, [5, 5])


def test_backward_accumulates_shared_operands() -> None:
    """d/dx sum(x * x + x) = 2x + 1."""
    tape = Tape()
    x = tape.watch(Tensor([1.0, -2.0, 3.0]), "x")
    grads = tape.backward(sum_all(add(mul(x, x), x)))
    assert np.array_equal(grads[x], [3.0, -3.0, 7.0])
    assert np.array_equal(grads.leaves()["x"], [3.0, -3.0, 7.0])


def test_backward_through_matmul() -> None:
    tape = Tape()
    a = tape.watch(Tensor([[1.0, 2.0], [3.0, 4.0]]), "a")
    b = tape.watch(Tensor([[1.0], [1.0]]), "b")
    grads = tape.backward(sum_all(matmul(a, b)))
    assert np.array_equal(grads[a], [[1.0, 1.0], [1.0, 1.0]])
    assert np.array_equal(grads[b], [[4.0], [6.0]])


def test_relu_records_distance_to_kink() -> None:
    tape = Tape()
    x = tape.watch(Tensor([0.5, -0.25, 2.0]))
    relu(x)
    assert tape.margins()["relu"] == 0.25


def test_operands_from_two_tapes_are_rejected() -> None:
    x = Tape().watch(Tensor([1.0]))
    y = Tape().watch(Tensor([2.0]))
    with pytest.raises(GraphError):
        add(x, y)


def test_backward_of_untracked_output() -> None:
    tape = Tape()
    with pytest.raises(GraphError):
        tape.backward(Tensor([1.0]))


def test_untracked_ops_do_not_record() -> None:
    out = add(Tensor([1.0]), Tensor([2.0]))
    assert out.tape is None and out.item() == 3.0


def test_named_tensors_walks_nested_records(desk_params) -> None:
    names = [name for name, _ in named_tensors(desk_params)]
    assert "fusion.p4f" in names
    assert "cfe.2.branch3.context.offset_predictor.weights" in names
    assert "bra.4.w_q" in names


def test_permute_round_trip_is_bit_identical() -> None:
    x = SplitMix64(3).uniform_tensor([2, 3, 4, 5], -1, 1)
    moved = permute(x, (2, 0, 3, 1))
    assert moved.dims == [4, 2, 5, 3]
    back = permute(moved, np.argsort((2, 0, 3, 1)))
    assert back.dims == x.dims and back.data.tobytes() == x.data.tobytes()
    with pytest.raises(ShapeError, match="not a permutation"):
        permute(x, (0, 1, 1, 2))


@pytest.mark.parametrize("shift", [-7.5, 0.25, 100.0])
def test_softmax_is_shift_invariant(shift: float) -> None:
    x = SplitMix64(4).uniform_tensor([3, 6], -5, 5)
    shifted = Tensor(x.data + shift)
    assert np.abs(softmax_lastdim(shifted).data - softmax_lastdim(x).data).max() <= 1e-12


def test_softmax_backward_conserves_the_row_sum() -> None:
    tape = Tape()
    x = tape.watch(SplitMix64(5).uniform_tensor([4, 7], -3, 3))
    grads = tape.backward(sum_all(softmax_lastdim(x)))[x]
    assert np.abs(grads).max() <= 1e-12


def test_relu_is_idempotent() -> None:
    x = SplitMix64(6).uniform_tensor([3, 5], -1, 1)
    once = relu(x)
    assert np.array_equal(relu(once).data, once.data)
    assert once.data.min() >= 0.0


def test_concat_places_every_element_at_its_offset() -> None:
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(100.0 + np.arange(10.0).reshape(2, 5))
    out = concat_axis([a, b], 1)
    assert out.dims == [2, 8]
    for i in range(2):
        for j in range(8):
            expected = a.data[i, j] if j < 3 else b.data[i, j - 3]
            assert out.data[i, j] == expected, (i, j)


def test_concat_rejects_mixed_dtypes() -> None:
    with pytest.raises(ShapeError, match="dtypes float64 and float32"):
        concat_axis([Tensor.ones([2, 2]), Tensor.ones([2, 2], dtype="float32")], 0)
    assert concat_axis([Tensor.ones([1, 2], dtype="float32")] * 2, 0).dtype == "float32"
