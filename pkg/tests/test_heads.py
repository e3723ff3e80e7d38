import numpy as np
import pytest

from jointkd import tensor as T
from jointkd.encoder import InputError
from jointkd.heads import attentive_pool, classify, init_dense, init_pooling
from jointkd.tensor import Tensor

from conftest import assert_grads_match


@pytest.fixture
def heads():
    r = np.random.default_rng(0)
    h = init_pooling(6, 4, r)
    h.update(init_dense(6, 3, r))
    return h


def test_pool_weights_are_distribution_over_valid(heads, rng):
    H = Tensor(rng.normal(size=(2, 5, 6)))
    mask = np.array([[1, 1, 1, 0, 0], [1, 0, 1, 0, 1]], dtype=bool)
    ws = []
    out = attentive_pool(heads, H, mask, weights_out=ws)
    w = ws[0]
    assert out.shape == (2, 6)
    assert np.all(w[~mask] == 0.0)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.data, np.einsum("bs,bsd->bd", w, H.data), atol=1e-12)


def test_pool_of_identical_rows_is_that_row(heads):
    row = np.arange(6.0)
    H = Tensor(np.tile(row, (1, 4, 1)))
    np.testing.assert_allclose(attentive_pool(heads, H, np.ones((1, 4), bool)).data[0], row, atol=1e-12)


def test_pool_single_valid_position(heads, rng):
    H = Tensor(rng.normal(size=(1, 3, 6)))
    out = attentive_pool(heads, H, np.array([False, True, False]))
    np.testing.assert_array_equal(out.data[0], H.data[0, 1])


def test_pool_rejects_empty_and_mismatched(heads, rng):
    H = Tensor(rng.normal(size=(1, 3, 6)))
    with pytest.raises(InputError):
        attentive_pool(heads, H, np.zeros((1, 3), bool))
    with pytest.raises(InputError):
        attentive_pool(heads, H, np.ones((1, 4), bool))


def test_head_gradients(heads, rng):
    H = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    mask = np.array([[1, 1, 0, 1], [1, 1, 1, 1]], dtype=bool)
    leaves = [H] + list(heads.values())
    assert_grads_match(lambda: T.cross_entropy(classify(heads, attentive_pool(heads, H, mask)), [0, 2]),
                       leaves)


def test_classify_is_affine(heads, rng):
    h = rng.normal(size=(3, 6))
    np.testing.assert_allclose(classify(heads, Tensor(h)).data,
                               h @ heads["dense.weight"].data + heads["dense.bias"].data)
