"""Compact convolutional feature extractor.

Four conv(3x3) + ReLU + 2x2 average-pool stages, global average pooling,
and one linear projection to the feature dimension. Input-size agnostic
down to 16x16 thanks to the pooled readout.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor, im2col, mean_over_axis, relu
from .nn import Linear, he_init


class ConvBackbone:
    def __init__(self, out_dim: int = 64, channels: Sequence[int] = (8, 16, 32, 64),
                 rng: np.random.Generator | None = None, name: str = "backbone"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.out_dim = out_dim
        self.channels = tuple(channels)
        self.conv_w: list[Tensor] = []
        self.conv_b: list[Tensor] = []
        c_in = 3
        for i, c_out in enumerate(self.channels):
            w = he_init(rng, 9 * c_in, c_out)
            self.conv_w.append(Tensor(w, requires_grad=True, name=f"{name}.conv{i}.w"))
            self.conv_b.append(Tensor(np.zeros(c_out), requires_grad=True,
                                      name=f"{name}.conv{i}.b"))
            c_in = c_out
        self.head = Linear(c_in, out_dim, rng, name=f"{name}.proj")

    def extract_features(self, patches: np.ndarray) -> Tensor:
        """Map (N, H, W, 3) pixel patches to an (N, out_dim) feature tensor."""
        arr = np.asarray(patches, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ValueError(f"expected a (N, H, W, 3) batch, got shape {arr.shape}")
        if arr.shape[1] % 16 or arr.shape[2] % 16 or min(arr.shape[1], arr.shape[2]) < 16:
            raise ValueError(
                f"backbone needs spatial dims that are multiples of 16, got {arr.shape[1]}x{arr.shape[2]}")
        n = arr.shape[0]
        x = Tensor(arr)
        for w, b in zip(self.conv_w, self.conv_b):
            h, wd = x.shape[1], x.shape[2]
            cols = im2col(x, kernel=3, stride=1, pad=1)
            y = cols @ w + b
            x = relu(y.reshape(n, h, wd, w.shape[1]))
            x = _avg_pool2(x)
        # global average pool over the remaining spatial grid
        x = x.reshape(n, x.shape[1] * x.shape[2], x.shape[3])
        x = mean_over_axis(x, 1)
        return self.head(x)

    def parameters(self) -> dict[str, Tensor]:
        out = {t.name: t for t in self.conv_w}
        out.update({t.name: t for t in self.conv_b})
        out.update(self.head.parameters())
        return out


def _avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h % 2 or w % 2:
        raise ValueError(f"pooling expects even spatial dims, got {h}x{w}")
    x = x.reshape(n, h2, 2, w2, 2, c)
    x = mean_over_axis(x, 2)
    x = mean_over_axis(x, 3)
    return x
