"""Network building blocks: linear layers, conditional batch norm, MLP embedder."""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeMismatch,
    Tensor,
    gather_rows,
    l2_normalize,
    relu,
    tmean,
    tsum,
)


class LabelRangeError(ValueError):
    """A class label falls outside the layer's conditioning table."""


class BatchTooSmall(ValueError):
    """Batch statistics need at least two rows in training mode."""


class Module:
    """Minimal module base: parameter discovery, train/eval mode, naming."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def train(self):
        self.training = True
        for child in self.__dict__.values():
            if isinstance(child, Module):
                child.train()
        return self

    def eval(self):
        self.training = False
        for child in self.__dict__.values():
            if isinstance(child, Module):
                child.eval()
        return self

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for name, attr in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(attr, Tensor) and attr.requires_grad:
                out.append((path, attr))
            elif isinstance(attr, Module):
                out.extend(attr.named_parameters(prefix=path + "."))
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{path}.{i}."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for name, attr in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(attr, Module):
                out.extend(attr.named_buffers(prefix=path + "."))
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(prefix=f"{path}.{i}."))
            elif isinstance(attr, np.ndarray):
                out.append((path, attr))
        return out

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """Affine map x @ W.T + b with uniform(-1/sqrt(in), 1/sqrt(in)) init.

    Layers feeding a batch norm should set bias=False: the norm's mean
    subtraction cancels a bias exactly, leaving a dead parameter.
    """

    def __init__(self, in_dim, out_dim, rng, bias=True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True
        )
        self.bias = (
            Tensor(rng.uniform(-bound, bound, size=out_dim), requires_grad=True)
            if bias
            else None
        )
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeMismatch(
                f"linear layer expects (B, {self.in_dim}), got {x.data.shape}"
            )
        out = x @ self.weight.T
        return out if self.bias is None else out + self.bias


class ConditionalBatchNorm(Module):
    """Batch norm with shared batch statistics and per-class scale/shift.

    Statistics are computed over the whole mixed-class batch; only the affine
    transform is class-conditional. Running statistics use the batch (biased)
    variance and momentum updates, and drive normalization in eval mode.
    """

    def __init__(self, num_classes, dim, momentum=0.1, epsilon=1e-5):
        super().__init__()
        if num_classes < 1:
            raise ValueError("conditional batch norm needs at least one class")
        self.gamma = Tensor(np.ones((num_classes, dim)), requires_grad=True)
        self.beta = Tensor(np.zeros((num_classes, dim)), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.num_classes = num_classes
        self.dim = dim
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    def forward(self, x, class_idx):
        x = x if isinstance(x, Tensor) else Tensor(x)
        idx = np.asarray(class_idx, dtype=np.intp)
        if x.data.ndim != 2 or x.data.shape[1] != self.dim:
            raise ShapeMismatch(f"expected (B, {self.dim}), got {x.data.shape}")
        if idx.shape != (x.data.shape[0],):
            raise ShapeMismatch("one class index per batch row required")
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_classes):
            raise LabelRangeError(
                f"class index outside [0, {self.num_classes}): "
                f"{idx.min()}..{idx.max()}"
            )

        if self.training:
            if x.data.shape[0] < 2:
                raise BatchTooSmall("training-mode batch norm needs B >= 2")
            mean = tmean(x, axis=0, keepdims=True)
            centered = x - mean
            var = tmean(centered * centered, axis=0, keepdims=True)
            xhat = centered / (var + self.epsilon).sqrt()
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean.data[0]
            self.running_var = (1.0 - m) * self.running_var + m * var.data[0]
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.epsilon)

        return gather_rows(self.gamma, idx) * xhat + gather_rows(self.beta, idx)


class EmbeddingNet(Module):
    """MLP trunk plus linear embedding head; outputs unit-norm rows."""

    def __init__(self, input_dim, hidden_dims, embedding_dim, rng):
        super().__init__()
        dims = [input_dim] + list(hidden_dims)
        self.trunk = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.head = Linear(dims[-1], embedding_dim, rng)
        self.input_dim = input_dim
        self.embedding_dim = embedding_dim

    def forward(self, x):
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.trunk:
            h = relu(layer(h))
        return l2_normalize(self.head(h))

    def trunk_parameter_count(self):
        return sum(l.weight.data.size + l.bias.data.size for l in self.trunk)

    def head_parameter_count(self):
        return self.head.weight.data.size + self.head.bias.data.size
