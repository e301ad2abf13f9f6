"""Small learnable building blocks: linear layers, MLP stacks, GCN weight stacks.

Weights use He fan-in initialization from an explicit numpy Generator so
model construction is reproducible from a seed alone.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor, matmul, relu


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class Linear:
    """y = x W + b with W shaped (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str = "linear"):
        self.name = name
        self.w = Tensor(he_init(rng, in_dim, out_dim), requires_grad=True,
                        name=f"{name}.w")
        self.b = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class Mlp:
    """Fully connected stack with ReLU between layers; the last layer is linear."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.name = name
        self.layers = [Linear(widths[i], widths[i + 1], rng, name=f"{name}.fc{i}")
                       for i in range(len(widths) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


class GcnStack:
    """L bias-free weight matrices for graph convolution layers.

    Layer widths chain input -> hidden... -> output; propagation is
    x <- act(adj_hat @ x @ W_l) with the activation chosen by the caller
    for the final layer.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 name: str = "gcn"):
        if len(widths) < 2:
            raise ValueError("a GCN stack needs at least input and output widths")
        self.name = name
        self.widths = tuple(int(w) for w in widths)
        self.weights = [Tensor(he_init(rng, widths[i], widths[i + 1]),
                               requires_grad=True, name=f"{name}.w{i}")
                        for i in range(len(widths) - 1)]

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def propagate(self, adj_hat: Tensor, x: Tensor, final_relu: bool) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise ValueError(
                f"{self.name}: input width {x.shape[1]} does not chain into {self.widths}")
        for i, w in enumerate(self.weights):
            x = matmul(matmul(adj_hat, x), w)
            if final_relu or i < len(self.weights) - 1:
                x = relu(x)
        return x

    def parameters(self) -> dict[str, Tensor]:
        return {w.name: w for w in self.weights}
