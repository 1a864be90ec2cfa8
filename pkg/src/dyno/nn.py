"""Parameter containers and the handful of layers the models share.

Initialization convention: linear weights and biases are uniform in
(-1/sqrt(fan_in), +1/sqrt(fan_in)); learnable tokens and slot seeds are
normal(0, 0.02).  Every constructor takes an explicit numpy Generator so
runs are reproducible.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, concat, matmul, sigmoid, tanh
from . import tensor as T

TOKEN_INIT_STD = 0.02


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def token_init(rng, shape, dtype=np.float32):
    return (rng.standard_normal(shape) * TOKEN_INIT_STD).astype(dtype)


class Module:
    """Base class: parameter discovery, state dicts, train/eval-free by design."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"load_state_dict[{k}]", arr.shape, p.data.shape)
            p.data = arr.copy()

    def num_params(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32):
        self.weight = Tensor(uniform_init(rng, (d_out, d_in), d_in, dtype), requires_grad=True)
        self.bias = Tensor(uniform_init(rng, (d_out,), d_in, dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight.transpose())
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.eps) * self.gamma + self.beta


class MLP(Module):
    """Stack of Linear layers with an activation between them (not after the
    last).  gelu by default: smooth everywhere, so every loss built from
    these blocks meets the finite-difference checker's smoothness bar."""

    def __init__(self, dims, rng, act=T.gelu, dtype=np.float32):
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype=dtype) for i in range(len(dims) - 1)]
        self.act = act

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = self.act(x)
        return x


class GRUCell(Module):
    """Standard gated recurrent cell; slot attention uses it as the slot update."""

    def __init__(self, d_in, d_hidden, rng, dtype=np.float32):
        self.w_ih = Tensor(uniform_init(rng, (3 * d_hidden, d_in), d_hidden, dtype), requires_grad=True)
        self.w_hh = Tensor(uniform_init(rng, (3 * d_hidden, d_hidden), d_hidden, dtype), requires_grad=True)
        self.b_ih = Tensor(uniform_init(rng, (3 * d_hidden,), d_hidden, dtype), requires_grad=True)
        self.b_hh = Tensor(uniform_init(rng, (3 * d_hidden,), d_hidden, dtype), requires_grad=True)
        self.d_hidden = d_hidden

    def __call__(self, x, h):
        d = self.d_hidden
        gi = matmul(x, self.w_ih.transpose()) + self.b_ih
        gh = matmul(h, self.w_hh.transpose()) + self.b_hh
        i_r, i_z, i_n = gi[..., :d], gi[..., d:2 * d], gi[..., 2 * d:]
        h_r, h_z, h_n = gh[..., :d], gh[..., d:2 * d], gh[..., 2 * d:]
        r = sigmoid(i_r + h_r)
        z = sigmoid(i_z + h_z)
        n = tanh(i_n + r * h_n)
        return n + z * (h - n)


def concat_last(tensors):
    return concat(tensors, axis=-1)
