"""Small feed-forward MLPs over flat parameter vectors, with analytic gradients.

Parameters are stored layer by layer as ``W`` (row-major, shape ``(n_out, n_in)``)
followed by ``b`` (shape ``(n_out,)``). Hidden layers use tanh; the output layer
uses tanh for actors and identity for critics.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from typing import BinaryIO, List, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: Tuple[int, ...]
    output_activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {self.layer_sizes!r}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(s[:-1], s[1:]))

    @functools.cached_property
    def layers(self) -> Tuple[Tuple[slice, slice, int, int, bool], ...]:
        """(weight slice, bias slice, n_in, n_out, tanh?) for each layer."""
        n = len(self.slices())
        return tuple((w, b, i, o, k < n - 1 or self.output_activation == "tanh")
                     for k, (w, b, i, o) in enumerate(self.slices()))

    def slices(self) -> List[Tuple[slice, slice, int, int]]:
        out = []
        pos = 0
        s = self.layer_sizes
        for a, b in zip(s[:-1], s[1:]):
            w = slice(pos, pos + a * b)
            pos += a * b
            bs = slice(pos, pos + b)
            pos += b
            out.append((w, bs, a, b))
        return out


def actor_spec(obs_dim: int, act_dim: int, hidden: Sequence[int] = (128, 128)) -> MlpSpec:
    return MlpSpec((obs_dim, *hidden, act_dim), "tanh")


def critic_spec(obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256)) -> MlpSpec:
    return MlpSpec((obs_dim + act_dim, *hidden, 1), "identity")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Fan-in uniform weights in [-1/sqrt(n_in), 1/sqrt(n_in)], zero biases."""
    params = np.zeros(spec.n_params)
    for w, _, n_in, n_out in spec.slices():
        bound = 1.0 / np.sqrt(n_in)
        params[w] = rng.uniform(-bound, bound, size=n_in * n_out)
    return params


def check_params(spec: MlpSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    return params


def _as_batch(spec: MlpSpec, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"input of shape {x.shape} does not match input size {spec.n_in}")
    return x, single


def forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Forward pass on a (batch, n_in) array, keeping each layer's input and output."""
    acts = [x]
    h = x
    for w, b, n_in, n_out, squash in spec.layers:
        z = h @ params[w].reshape(n_out, n_in).T + params[b]
        h = np.tanh(z) if squash else z
        acts.append(h)
    return h, acts


def backward_cached(spec: MlpSpec, params: np.ndarray, acts, upstream: np.ndarray):
    """Gradients of sum(upstream * output) given the activations from forward_cached."""
    grad = np.empty_like(params)
    g = upstream
    for i in range(len(spec.layers) - 1, -1, -1):
        w, b, n_in, n_out, squash = spec.layers[i]
        if squash:
            out = acts[i + 1]
            g = g * (1.0 - out * out)
        grad[w] = (g.T @ acts[i]).ravel()
        grad[b] = g.sum(axis=0)
        g = g @ params[w].reshape(n_out, n_in)
    return grad, g


def forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate the network on one input vector or a (batch, n_in) array."""
    params = check_params(spec, params)
    xb, single = _as_batch(spec, x)
    y, _ = forward_cached(spec, params, xb)
    return y[0] if single else y


def backward(spec: MlpSpec, params: np.ndarray, x, upstream_grad):
    """Return (param_grad, input_grad) of <upstream_grad, forward(spec, params, x)>.

    For batched input the parameter gradient is summed over the batch and the
    input gradient keeps one row per sample.
    """
    params = check_params(spec, params)
    xb, single = _as_batch(spec, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], spec.n_out):
        raise ValueError(f"upstream gradient of shape {np.shape(upstream_grad)} does not match output")
    _, acts = forward_cached(spec, params, xb)
    pgrad, igrad = backward_cached(spec, params, acts, g)
    return pgrad, (igrad[0] if single else igrad)


def forward_population(spec: MlpSpec, params_stack: np.ndarray, x_stack: np.ndarray) -> np.ndarray:
    """Evaluate K different networks, member k on input row k.

    Each member's output depends only on its own row, so results do not change
    with the batch composition (the rollout code relies on this).
    """
    h = x_stack
    for w, b, n_in, n_out, squash in spec.layers:
        W = params_stack[:, w].reshape(-1, n_out, n_in)
        z = np.einsum("koi,ki->ko", W, h) + params_stack[:, b]
        h = np.tanh(z) if squash else z
    return h


def forward_stacked(spec: MlpSpec, params_stack: np.ndarray, x: np.ndarray):
    """K networks on K input batches: params (K, P), x (K, N, n_in) -> (K, N, n_out).

    Returns the output and the per-layer activations for backward_stacked.
    """
    acts = [x]
    h = x
    for w, b, n_in, n_out, squash in spec.layers:
        W = params_stack[:, w].reshape(-1, n_out, n_in)
        z = np.matmul(h, W.transpose(0, 2, 1)) + params_stack[:, None, b]
        h = np.tanh(z) if squash else z
        acts.append(h)
    return h, acts


def backward_stacked(spec: MlpSpec, params_stack: np.ndarray, acts, upstream: np.ndarray) -> np.ndarray:
    """Per-network parameter gradients (K, P) of sum(upstream * output)."""
    grad = np.empty_like(params_stack)
    g = upstream
    for i in range(len(spec.layers) - 1, -1, -1):
        w, b, n_in, n_out, squash = spec.layers[i]
        if squash:
            out = acts[i + 1]
            g = g * (1.0 - out * out)
        grad[:, w] = np.matmul(g.transpose(0, 2, 1), acts[i]).reshape(len(g), -1)
        grad[:, b] = g.sum(axis=1)
        if i:
            g = np.matmul(g, params_stack[:, w].reshape(-1, n_out, n_in))
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One Adam descent step; returns new parameters and updates ``state`` in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("shape mismatch between parameters, gradient and optimizer state")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise FloatingPointError(f"non-finite gradient ({bad} of {grad.size} entries) at Adam step {state.t + 1}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# Genotype serialization: uint64 little-endian length, then float64 little-endian values.

def write_vector(fh: BinaryIO, values: np.ndarray) -> int:
    values = np.asarray(values, dtype="<f8")
    fh.write(struct.pack("<Q", values.size))
    fh.write(values.tobytes())
    return 8 + 8 * values.size


def read_vector(fh: BinaryIO) -> np.ndarray:
    head = fh.read(8)
    if len(head) != 8:
        raise EOFError("truncated vector header")
    (n,) = struct.unpack("<Q", head)
    body = fh.read(8 * n)
    if len(body) != 8 * n:
        raise EOFError("truncated vector body")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)
