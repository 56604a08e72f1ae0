"""

NN micro

Small dense networks with exact manual backpropagation, an Adam optimizer,
gradient checking against central finite differences, Polyak averaging and
a manifest + binary blob checkpoint format.

Inputs are batched row-wise: x has shape [n, fan_in] (a single vector is
treated as a batch of one and returned as a vector).

"""

import json
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from lab_settings import read_lab_settings
from lab_errors import DimensionError, NonFiniteError

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

ACTIVATIONS = ('relu', 'tanh', 'identity')
MAX_LAYERS = 4
BLOB_DTYPE = '<f8'


def _activate(name, z):

    if name == 'relu':
        return np.maximum(z, 0.0)
    if name == 'tanh':
        return np.tanh(z)
    return z


def _activation_grad(name, z, out):

    if name == 'relu':
        return (z > 0).astype(float)
    if name == 'tanh':
        return 1.0 - out ** 2
    return np.ones_like(z)


class DenseNet:
    """
    Fixed-depth dense network.

    layer_sizes lists widths from input to output, so a net with
    layer_sizes [3, 256, 256, 1] has three affine layers. activations holds
    one entry per affine layer.
    """

    def __init__(self, layer_sizes, activations, rng=None, params=None):

        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or len(layer_sizes) - 1 > MAX_LAYERS:
            raise DimensionError(f'DenseNet supports 1 to {MAX_LAYERS} layers, got sizes {layer_sizes}')
        if len(activations) != len(layer_sizes) - 1:
            raise DimensionError(f'{len(layer_sizes) - 1} layers need as many activations, got {activations}')
        for name in activations:
            if name not in ACTIVATIONS:
                raise ValueError(f'Unknown activation: {name}')

        self.layer_sizes = layer_sizes
        self.activations = list(activations)

        if params is not None:
            self.params = [np.array(p, dtype=float) for p in params]
            expected = self.param_shapes()
            if [p.shape for p in self.params] != expected:
                raise DimensionError(f'Parameter shapes {[p.shape for p in self.params]} != {expected}')
        else:
            if rng is None:
                raise ValueError('DenseNet needs an rng or explicit params')
            self.params = []
            for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                self.params.append(rng.uniform(-bound, bound, size=fan_out))

    def param_shapes(self):

        shapes = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    @property
    def n_params(self):
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def clone(self):
        return DenseNet(self.layer_sizes, self.activations, params=[p.copy() for p in self.params])

    def get_flat(self):
        return np.concatenate([p.reshape(-1) for p in self.params])

    def set_flat(self, flat):

        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise DimensionError(f'Flat vector of length {flat.size} != {self.n_params} parameters')
        offset = 0
        for i, p in enumerate(self.params):
            self.params[i] = flat[offset:offset + p.size].reshape(p.shape).copy()
            offset += p.size

    def _as_batch(self, x):

        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.layer_sizes[0]:
            raise DimensionError(f'Input width {x.shape[1]} != {self.layer_sizes[0]}')
        return x, single

    def forward_cache(self, x):
        ''' Forward pass returning the output and the per-layer (input, pre-activation, output) cache'''

        h, single = self._as_batch(x)
        cache = []
        for layer in range(self.n_layers):
            weight, bias = self.params[2 * layer], self.params[2 * layer + 1]
            z = h @ weight + bias
            out = _activate(self.activations[layer], z)
            cache.append((h, z, out))
            h = out
        return (h[0] if single else h), cache

    def forward(self, x):

        return self.forward_cache(x)[0]

    def backward(self, x, upstream, cache=None):
        """
        Reverse-mode gradients of sum(upstream * forward(x)).

        Returns:
        - grads (list of ndarray): one gradient per parameter, same order as params.
        - dx (ndarray): gradient with respect to the input, same shape as x.
        """

        if cache is None:
            _, cache = self.forward_cache(x)
        single = np.asarray(x).ndim == 1
        delta = np.atleast_2d(np.asarray(upstream, dtype=float))
        if delta.shape != cache[-1][2].shape:
            raise DimensionError(f'Upstream shape {delta.shape} != output shape {cache[-1][2].shape}')

        grads = [None] * len(self.params)
        for layer in reversed(range(self.n_layers)):
            h, z, out = cache[layer]
            delta = delta * _activation_grad(self.activations[layer], z, out)
            grads[2 * layer] = h.T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            delta = delta @ self.params[2 * layer].T
        return grads, (delta[0] if single else delta)


@dataclass
class AdamState:
    """Adam moments for a list of parameter arrays"""

    lr: float = 3e-4
    eps: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    first: List[np.ndarray] = field(default_factory=list)
    second: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=3e-4, eps=1e-5):
        return cls(lr=lr, eps=eps, first=[np.zeros_like(p) for p in params],
                   second=[np.zeros_like(p) for p in params])


def adam_step(state, params, grads):
    ''' Bias-corrected Adam update of params in place; returns params'''

    if len(grads) != len(params) or len(state.first) != len(params):
        raise DimensionError(f'Adam got {len(grads)} gradients for {len(params)} parameters')
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError('Adam received a non-finite gradient')

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params


def clip_grad_norm(grads, max_norm):
    ''' Scale grads in place so their global norm is at most max_norm; returns the norm before clipping'''

    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def polyak_update(target, online, sigma):
    ''' target <- sigma * online + (1 - sigma) * target, for DenseNets or lists of arrays'''

    target_params = target.params if isinstance(target, DenseNet) else target
    online_params = online.params if isinstance(online, DenseNet) else online
    for t, o in zip(target_params, online_params):
        t *= 1.0 - sigma
        t += sigma * o
    return target


def relative_error(a, b, floor=1e-7):

    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _has_kink(net, x, threshold):

    _, cache = net.forward_cache(x)
    return any(name == 'relu' and np.any(np.abs(z) < threshold)
               for name, (_, z, _) in zip(net.activations, cache))


def grad_check(net, loss_fn, trials, rng, step=1e-5, kink_threshold=1e-3, batch=1):
    """
    Worst relative error between backward and central finite differences.

    Parameters:
    - net (DenseNet): network under test (parameters are restored afterwards).
    - loss_fn (callable): maps outputs to (loss, dloss/doutputs).
    - trials (int): number of random inputs.
    - rng (numpy Generator): draws the inputs.
    - kink_threshold (float): ReLU inputs are resampled while any
      pre-activation lies within this distance of zero.
    """

    if trials < 1:
        raise ValueError('grad_check needs at least one trial')
    worst = 0.0
    flat = net.get_flat()
    for _ in range(trials):
        x = rng.normal(size=(batch, net.layer_sizes[0]))
        for _ in range(100):
            if not _has_kink(net, x, kink_threshold):
                break
            x = rng.normal(size=(batch, net.layer_sizes[0]))

        out = net.forward(x)
        _, upstream = loss_fn(out)
        grads, _ = net.backward(x, upstream)
        analytic = np.concatenate([g.reshape(-1) for g in grads])

        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            shifted = flat.copy()
            shifted[i] += step
            net.set_flat(shifted)
            plus = loss_fn(net.forward(x))[0]
            shifted[i] -= 2 * step
            net.set_flat(shifted)
            minus = loss_fn(net.forward(x))[0]
            numeric[i] = (plus - minus) / (2 * step)
        net.set_flat(flat)
        worst = max(worst, float(np.max(relative_error(analytic, numeric))))
    return worst


def save_tensors(path_prefix, tensors, meta=None):
    """
    Write named tensors as <prefix>.json (manifest) and <prefix>.bin.

    The blob holds little-endian float64 values in manifest order; offsets
    count float64 elements from the start of the blob.
    """

    manifest = dict(meta or {})
    entries, offset, chunks = [], 0, []
    for name, value in tensors.items():
        value = np.asarray(value, dtype=float)
        entries.append({'name': name, 'shape': list(value.shape), 'offset': offset})
        offset += value.size
        chunks.append(value.astype(BLOB_DTYPE).reshape(-1))
    manifest['tensors'] = entries
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=BLOB_DTYPE)
    with open(f'{path_prefix}.json', 'w') as file:
        json.dump(manifest, file, indent=1)
    with open(f'{path_prefix}.bin', 'wb') as file:
        file.write(blob.astype(BLOB_DTYPE).tobytes())
    logger.debug(f'Wrote {len(entries)} tensors to {path_prefix}.bin')


def load_tensors(path_prefix):
    ''' Read a manifest + blob pair; returns (tensors dict, manifest)'''

    with open(f'{path_prefix}.json', 'r') as file:
        manifest = json.load(file)
    blob = np.fromfile(f'{path_prefix}.bin', dtype=BLOB_DTYPE).astype(float)
    tensors = {}
    for entry in manifest['tensors']:
        size = int(np.prod(entry['shape'])) if entry['shape'] else 1
        if entry['offset'] + size > blob.size:
            raise DimensionError(f"Tensor {entry['name']} runs past the end of {path_prefix}.bin")
        tensors[entry['name']] = blob[entry['offset']:entry['offset'] + size].reshape(entry['shape'])
    return tensors, manifest


def save_checkpoint(net, path_prefix):

    tensors = {}
    for layer in range(net.n_layers):
        tensors[f'weight_{layer}'] = net.params[2 * layer]
        tensors[f'bias_{layer}'] = net.params[2 * layer + 1]
    save_tensors(path_prefix, tensors, {'layer_sizes': net.layer_sizes, 'activations': net.activations})


def load_checkpoint(path_prefix):

    tensors, manifest = load_tensors(path_prefix)
    params = []
    for layer in range(len(manifest['layer_sizes']) - 1):
        params += [tensors[f'weight_{layer}'], tensors[f'bias_{layer}']]
    return DenseNet(manifest['layer_sizes'], manifest['activations'], params=params)
