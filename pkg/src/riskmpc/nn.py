"""Tiny layer library: linear maps and MLPs with named parameters.

Weights are initialized uniformly in +-1/sqrt(fan_in).  Every layer exposes
`parameters()` as an ordered {name: Parameter} dict so checkpointing and the
Adam optimizer can address the full model flatly.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, concat, load_checkpoint, save_checkpoint


class Module:
    def parameters(self):
        """Ordered name -> Parameter mapping, recursing into sub-modules."""
        out = {}
        for name, attr in vars(self).items():
            if isinstance(attr, Parameter):
                out[name] = attr
            elif isinstance(attr, Module):
                for sub, p in attr.parameters().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        for sub, p in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = p
                    elif isinstance(item, Parameter):
                        out[f"{name}.{i}"] = item
        return out

    def param_list(self):
        return list(self.parameters().values())

    def save(self, path):
        save_checkpoint(path, self.parameters())

    def load(self, path):
        arrays = load_checkpoint(path)
        params = self.parameters()
        missing = set(params) ^ set(arrays)
        if missing:
            raise KeyError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
        for name, p in params.items():
            if p.data.shape != arrays[name].shape:
                raise ValueError(
                    f"shape mismatch for {name}: {p.data.shape} vs {arrays[name].shape}")
            p.data = arrays[name].copy()
            p.moment1 = np.zeros_like(p.data)
            p.moment2 = np.zeros_like(p.data)
            p.step_count = 0
            p.grad = None


def uniform_init(rng, *shape):
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, n_in, n_out):
        self.weight = Parameter(uniform_init(rng, n_in, n_out))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x):
        return x @ self.weight + self.bias


class MLP(Module):
    """Stack of linear layers with tanh between them (linear final layer)."""

    def __init__(self, rng, sizes):
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.tanh()
        return x


def one_hot(labels, num_classes):
    """Integer array -> float64 one-hot with a trailing class axis."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out
