import json
import os

import numpy as np
import pytest

from lab_errors import DimensionError, NonFiniteError
from nn_micro import (DenseNet, AdamState, adam_step, clip_grad_norm, polyak_update, grad_check, relative_error,
                      save_tensors, load_tensors, save_checkpoint, load_checkpoint)


def _linear_loss(weights):
    ''' loss = sum(c * out) for fixed random c'''
    def loss_fn(out):
        return float(np.sum(weights * out)), weights
    return loss_fn


def test_shapes_and_parameter_count(rng):
    net = DenseNet([3, 5, 2], ['relu', 'identity'], rng)
    assert net.param_shapes() == [(3, 5), (5,), (5, 2), (2,)]
    assert net.n_params == 4 * 5 + 6 * 2
    assert net.forward(np.ones(3)).shape == (2,)
    assert net.forward(np.ones((7, 3))).shape == (7, 2)
    with pytest.raises(DimensionError):
        net.forward(np.ones(4))


def test_layer_limits(rng):
    with pytest.raises(DimensionError):
        DenseNet([2, 2, 2, 2, 2, 2], ['relu'] * 5, rng)
    with pytest.raises(DimensionError):
        DenseNet([2, 2], ['relu', 'relu'], rng)


def test_tanh_net_gradients(rng):
    net = DenseNet([3, 8, 2], ['tanh', 'identity'], rng)
    assert grad_check(net, _linear_loss(rng.normal(size=2)), 3, rng) < 1e-4


def test_relu_net_gradients_away_from_kinks(rng):
    net = DenseNet([4, 16, 16, 1], ['relu', 'relu', 'identity'], rng)
    assert grad_check(net, _linear_loss(rng.normal(size=1)), 3, rng) < 1e-4


def test_grad_check_restores_parameters(rng):
    net = DenseNet([2, 3, 1], ['tanh', 'identity'], rng)
    before = net.get_flat()
    grad_check(net, _linear_loss(np.ones(1)), 1, rng)
    assert np.array_equal(net.get_flat(), before)


def test_input_gradient(rng):
    net = DenseNet([3, 6, 2], ['tanh', 'tanh'], rng)
    x = rng.normal(size=(4, 3))
    upstream = rng.normal(size=(4, 2))
    _, dx = net.backward(x, upstream)
    numeric = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            shifted = x.copy()
            shifted[i, j] += 1e-5
            plus = np.sum(upstream * net.forward(shifted))
            shifted[i, j] -= 2e-5
            minus = np.sum(upstream * net.forward(shifted))
            numeric[i, j] = (plus - minus) / 2e-5
    assert np.max(relative_error(dx, numeric)) < 1e-4


def test_adam_first_step_matches_closed_form():
    params = [np.array([1.0, -2.0, 0.5]), np.array([[3.0]])]
    grads = [np.array([0.3, -1e-4, 2.0]), np.array([[-5.0]])]
    state = AdamState.for_params(params, lr=1e-3, eps=1e-5)
    before = [p.copy() for p in params]
    adam_step(state, params, grads)
    for p, b, g in zip(params, before, grads):
        expected = -np.sign(g) * state.lr / (1.0 + state.eps / np.abs(g))
        assert np.max(np.abs((p - b) - expected)) < 1e-9
    assert state.step == 1


def test_adam_minimizes_a_quadratic():
    target = np.array([1.0, -3.0])
    params = [np.zeros(2)]
    state = AdamState.for_params(params, lr=0.05)
    for _ in range(2000):
        adam_step(state, params, [2.0 * (params[0] - target)])
    assert np.allclose(params[0], target, atol=1e-2)


def test_adam_rejects_non_finite_gradients():
    params = [np.zeros(2)]
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.for_params(params), params, [np.array([np.nan, 0.0])])


def test_clip_grad_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.sqrt(grads[0] ** 2 + grads[1] ** 2)[0] == pytest.approx(1.0, abs=1e-9)
    untouched = [np.array([0.1])]
    clip_grad_norm(untouched, None)
    assert untouched[0][0] == 0.1


def test_polyak_update(rng):
    online = DenseNet([2, 3, 1], ['relu', 'identity'], rng)
    target = DenseNet([2, 3, 1], ['relu', 'identity'], rng)
    start = target.get_flat()
    polyak_update(target, online, 0.25)
    assert np.allclose(target.get_flat(), 0.25 * online.get_flat() + 0.75 * start)
    polyak_update(target, online, 1.0)
    assert np.array_equal(target.get_flat(), online.get_flat())


def test_polyak_update_extremes_and_convexity(rng):
    online = DenseNet([2, 3, 1], ['relu', 'identity'], rng)
    target = DenseNet([2, 3, 1], ['relu', 'identity'], rng)
    start = target.get_flat()
    polyak_update(target, online, 0.0)
    assert np.array_equal(target.get_flat(), start)
    for sigma in (0.1, 0.5, 0.9):
        target.set_flat(start)
        polyak_update(target, online, sigma)
        low = np.minimum(start, online.get_flat()) - 1e-12
        high = np.maximum(start, online.get_flat()) + 1e-12
        assert np.all((low <= target.get_flat()) & (target.get_flat() <= high))


def test_checkpoint_reproduces_outputs(tmp_path, rng):
    net = DenseNet([3, 4, 2], ['tanh', 'identity'], rng)
    prefix = os.path.join(tmp_path, 'net')
    save_checkpoint(net, prefix)
    assert os.path.getsize(prefix + '.bin') == 8 * net.n_params
    loaded = load_checkpoint(prefix)
    x = rng.normal(size=(5, 3))
    assert np.array_equal(loaded.forward(x), net.forward(x))


def test_tensor_blob_layout(tmp_path):
    prefix = os.path.join(tmp_path, 'blob')
    save_tensors(prefix, {'a': np.arange(3.0), 'b': np.array([[7.5]])}, {'note': 'x'})
    manifest = json.loads(open(prefix + '.json').read())
    assert manifest['note'] == 'x'
    assert [entry['offset'] for entry in manifest['tensors']] == [0, 3]
    raw = np.frombuffer(open(prefix + '.bin', 'rb').read(), dtype='<f8')
    assert raw.tolist() == [0.0, 1.0, 2.0, 7.5]
    tensors, _ = load_tensors(prefix)
    assert tensors['b'].shape == (1, 1)


def test_truncated_blob_is_rejected(tmp_path):
    prefix = os.path.join(tmp_path, 'blob')
    save_tensors(prefix, {'a': np.arange(4.0)})
    with open(prefix + '.bin', 'wb') as file:
        file.write(np.zeros(2, dtype='<f8').tobytes())
    with pytest.raises(DimensionError):
        load_tensors(prefix)
