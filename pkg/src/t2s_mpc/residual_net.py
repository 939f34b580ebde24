"""Plain-numpy MLP for the residual dynamics model.

Layer ``i`` maps ``h -> W_i @ h + b_i`` with ``W_i`` of shape ``(out, in)``.
Hidden layers use ReLU, the output layer is linear.  Parameters split into a
*fast* partition (the output layer) and a *slow* partition (everything
before it).

Flat serialization order: for each layer in turn, ``W`` row-major, then
``b``.  :func:`save_params` writes that vector as text, one value per line,
preceded by a ``# sizes: ...`` header line.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

STATE_CONTROL_DIM = 8
OUTPUT_DIM = 3
HIDDEN_DIM = 64

FULL_PARAM_COUNT = 6979
FAST_PARAM_COUNT = 195
SLOW_PARAM_COUNT = 6784
REDUCED_PARAM_COUNT = 4931


def layer_sizes(input_dim: int, hidden_dim: int = HIDDEN_DIM, output_dim: int = OUTPUT_DIM,
                n_hidden: int = 2) -> Tuple[int, ...]:
    return (input_dim,) + (hidden_dim,) * n_hidden + (output_dim,)


def count_params(sizes) -> int:
    return sum(n_out * n_in + n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def expected_param_count(input_dim: int):
    """Parameter count the default architecture must have, or None if unlisted."""
    return {40: FULL_PARAM_COUNT, STATE_CONTROL_DIM: REDUCED_PARAM_COUNT}.get(input_dim)


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ValueError("need matching weights/biases for at least two layers")
        sizes = self.sizes
        if sizes[1:-1] == (HIDDEN_DIM,) * (len(sizes) - 2) and sizes[-1] == OUTPUT_DIM:
            expected = expected_param_count(sizes[0])
            if expected is not None:
                assert self.n_params == expected, (
                    f"parameter count {self.n_params} != expected {expected} for sizes {sizes}")
                if expected == FULL_PARAM_COUNT:
                    assert self.n_fast == FAST_PARAM_COUNT and self.n_slow == SLOW_PARAM_COUNT, (
                        f"fast/slow split {self.n_fast}/{self.n_slow} != "
                        f"{FAST_PARAM_COUNT}/{SLOW_PARAM_COUNT}")

    @property
    def sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def n_fast(self) -> int:
        return self.weights[-1].size + self.biases[-1].size

    @property
    def n_slow(self) -> int:
        return self.n_params - self.n_fast

    def arrays(self, partition: str = "all") -> List[np.ndarray]:
        """Parameter arrays of a partition, in serialization order."""
        layers = {"all": range(self.n_layers), "fast": [self.n_layers - 1],
                  "slow": range(self.n_layers - 1)}[partition]
        out = []
        for i in layers:
            out.extend((self.weights[i], self.biases[i]))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(seed=None, input_dim: int = 40, hidden_dim: int = HIDDEN_DIM,
                output_dim: int = OUTPUT_DIM, n_hidden: int = 2) -> MlpParams:
    """He-scaled hidden layers, exactly-zero output layer."""
    rng = np.random.default_rng(seed)
    sizes = layer_sizes(input_dim, hidden_dim, output_dim, n_hidden)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-2], sizes[1:-1]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    weights.append(np.zeros((sizes[-1], sizes[-2])))
    biases.append(np.zeros(sizes[-1]))
    return MlpParams(weights, biases)


def forward(p: MlpParams, z):
    """Evaluate the network on ``z`` of shape ``(in,)`` or ``(n, in)``.

    Returns ``(output, cache)``; the cache holds every layer input and every
    hidden pre-activation for :func:`backward_params`.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite network input")
    h = z
    inputs, pre = [], []
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        inputs.append(h)
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0)
    inputs.append(h)
    out = h @ p.weights[-1].T + p.biases[-1]
    return out, (inputs, pre)


def backward_params(p: MlpParams, cache, grad_out, partition: str = "all"):
    """Reverse-mode gradient of ``sum(output * grad_out)`` w.r.t. the parameters.

    Batched caches are summed over the batch.  Returns ``(grad_fast,
    grad_slow)``, each a list of arrays ordered like :meth:`MlpParams.arrays`;
    a partition that was not requested is returned as ``None``.  Asking for
    ``"fast"`` only skips back-propagation through the hidden layers.
    """
    inputs, pre = cache
    g = np.asarray(grad_out, dtype=float)
    batched = g.ndim == 2

    def outer(delta, x):
        return delta.T @ x if batched else np.outer(delta, x)

    def bsum(delta):
        return delta.sum(axis=0) if batched else delta.copy()

    grad_fast = [outer(g, inputs[-1]), bsum(g)]
    if partition == "fast":
        return grad_fast, None

    grad_slow = []
    delta = g
    for i in range(p.n_layers - 2, -1, -1):
        delta = (delta @ p.weights[i + 1]) * (pre[i] > 0.0)
        grad_slow[:0] = [outer(delta, inputs[i]), bsum(delta)]
    if partition == "slow":
        return None, grad_slow
    return grad_fast, grad_slow


def input_jacobian(p: MlpParams, z, n_inputs: int = STATE_CONTROL_DIM) -> np.ndarray:
    """d(output)/d(z[:n_inputs]); shape ``(3, n_inputs)`` or ``(n, 3, n_inputs)``.

    ReLU derivative is taken as 0 at exactly-zero pre-activation.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = z[None] if single else z
    _, (_, pre) = forward(p, zb)
    # propagate from the output back: J = W_L D_{L-1} W_{L-1} ... D_1 W_1[:, :n]
    jac = np.broadcast_to(p.weights[-1], (zb.shape[0],) + p.weights[-1].shape)
    for i in range(p.n_layers - 2, -1, -1):
        jac = jac * (pre[i] > 0.0)[:, None, :]
        w = p.weights[i] if i > 0 else p.weights[0][:, :n_inputs]
        jac = jac @ w
    return jac[0] if single else jac


def flatten(p: MlpParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in p.arrays("all")])


def unflatten(vec, sizes) -> MlpParams:
    vec = np.asarray(vec, dtype=float)
    if vec.size != count_params(sizes):
        raise ValueError(f"vector of length {vec.size} does not match sizes {tuple(sizes)}")
    weights, biases, pos = [], [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(vec[pos:pos + n_out * n_in].reshape(n_out, n_in).copy())
        pos += n_out * n_in
        biases.append(vec[pos:pos + n_out].copy())
        pos += n_out
    return MlpParams(weights, biases)


def save_params(p: MlpParams, path) -> None:
    header = "sizes: " + " ".join(str(s) for s in p.sizes)
    np.savetxt(path, flatten(p), fmt="%.17g", header=header)


def load_params(path) -> MlpParams:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# sizes:"):
        raise ValueError(f"{path}: missing '# sizes:' header")
    sizes = tuple(int(s) for s in first.split(":", 1)[1].split())
    return unflatten(np.loadtxt(path, ndmin=1), sizes)
