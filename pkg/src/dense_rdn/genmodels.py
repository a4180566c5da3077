"""Initial-condition generator and bit-vector decoder.

Parameters live in plain ``dict[str, ndarray]`` so an optimizer can register
each entry as a tape leaf; the model objects only describe architecture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dense_rdn.diffcore import Tensor, ops
from dense_rdn.diffcore.tensor import as_tensor
from dense_rdn.reactor import gaussian_kernel


def sample_z(rng: np.random.Generator, n_bits: int, batch: int | None = None) -> np.ndarray:
    """Fair random bits as floats; shape [n_bits] or [batch, n_bits]."""
    shape = (n_bits,) if batch is None else (batch, n_bits)
    return rng.integers(0, 2, size=shape).astype(np.float64)


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass(frozen=True)
class Generator:
    """Blocks of stride-2 transposed conv -> batch norm -> tanh.

    The last block skips batch norm and maps its tanh output to
    ``max_concentration * sigmoid(scale_i) * (a + 1) / 2`` per species, then
    applies a fixed periodic Gaussian blur. Output: [B, S, h0 2^n, w0 2^n].
    ``seed_shape`` other than (1, 1) inserts a linear map from ``z`` to a
    ``n_bits x h0 x w0`` seed, which allows non-square domains.
    """

    n_species: int
    n_bits: int = 16
    n_blocks: int = 6
    base_width: int = 32
    min_width: int = 8
    kernel: int = 4
    seed_shape: tuple[int, int] = (1, 1)
    blur_sigma: float = 1.0
    max_concentration: float = 10.0
    init_max: float = 1.0

    @property
    def output_shape(self) -> tuple[int, int]:
        s = 2**self.n_blocks
        return self.seed_shape[0] * s, self.seed_shape[1] * s

    def widths(self) -> list[int]:
        hidden = [max(self.base_width >> i, self.min_width) for i in range(self.n_blocks - 1)]
        return hidden + [self.n_species]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.n_bits < 1:
            raise ValueError("the generator needs at least one latent bit")
        p: dict[str, np.ndarray] = {}
        h0, w0 = self.seed_shape
        if (h0, w0) != (1, 1):
            p["seed_w"] = rng.normal(0.0, 1.0 / np.sqrt(self.n_bits), (self.n_bits, self.n_bits * h0 * w0))
            p["seed_b"] = np.zeros(self.n_bits * h0 * w0)
        c_in = self.n_bits
        for i, c_out in enumerate(self.widths()):
            std = 1.0 / np.sqrt(4.0 * c_in)
            p[f"w{i}"] = rng.normal(0.0, std, (c_in, c_out, self.kernel, self.kernel))
            p[f"b{i}"] = np.zeros(c_out)
            if i < self.n_blocks - 1:
                p[f"gamma{i}"] = np.ones(c_out)
                p[f"beta{i}"] = np.zeros(c_out)
            c_in = c_out
        p["scale"] = np.full(self.n_species, _logit(self.init_max / self.max_concentration))
        return p

    def __call__(self, z, params) -> Tensor:
        z = as_tensor(z)
        if z.ndim == 1:
            z = ops.reshape(z, (1, z.shape[0]))
        if z.shape[1] != self.n_bits:
            raise ValueError(f"z has {z.shape[1]} bits, generator expects {self.n_bits}")
        b = z.shape[0]
        h0, w0 = self.seed_shape
        if (h0, w0) == (1, 1):
            x = ops.reshape(z, (b, self.n_bits, 1, 1))
        else:
            if "seed_w" not in params:
                raise ValueError("generator parameters lack the seed projection")
            x = ops.reshape(ops.matmul(z, params["seed_w"]) + params["seed_b"], (b, self.n_bits, h0, w0))
        last = self.n_blocks - 1
        for i in range(self.n_blocks):
            w = as_tensor(params[f"w{i}"])
            if w.shape[0] != x.shape[1]:
                raise ValueError(f"block {i}: weight expects {w.shape[0]} channels, got {x.shape[1]}")
            bias = ops.reshape(as_tensor(params[f"b{i}"]), (1, w.shape[1], 1, 1))
            x = ops.conv_transpose2d(x, w) + bias
            if i < last:
                x = ops.batch_norm(x, axes=(0, 2, 3))
                x = ops.scale_shift(x, params[f"gamma{i}"], params[f"beta{i}"], axis=1)
            x = ops.tanh(x)
        scale = ops.sigmoid(params["scale"]) * self.max_concentration
        x = ops.scale_shift((x + 1.0) * 0.5, scale, np.zeros(self.n_species), axis=1)
        return ops.conv2d_periodic(x, gaussian_kernel(self.blur_sigma))


def generate_x0(z, params, generator: Generator) -> Tensor:
    return generator(z, params)


@dataclass(frozen=True)
class Encoder:
    """Blocks of stride-2 conv -> tanh -> batch norm, then a linear map to bit logits."""

    n_species: int
    n_bits: int = 16
    n_blocks: int = 3
    base_width: int = 32
    max_width: int = 64
    kernel: int = 4

    def widths(self) -> list[int]:
        return [min(self.base_width << i, self.max_width) for i in range(self.n_blocks)]

    def _check_extent(self, spatial) -> tuple[int, int]:
        f = 2**self.n_blocks
        u, v = spatial
        if u % f or v % f:
            raise ValueError(f"spatial extent {spatial} not divisible by 2^{self.n_blocks}")
        return u // f, v // f

    def init_params(self, rng: np.random.Generator, spatial) -> dict[str, np.ndarray]:
        hu, hv = self._check_extent(spatial)
        p: dict[str, np.ndarray] = {}
        c_in = self.n_species
        for i, c_out in enumerate(self.widths()):
            std = 1.0 / np.sqrt(c_in * self.kernel * self.kernel)
            p[f"w{i}"] = rng.normal(0.0, std, (c_in, c_out, self.kernel, self.kernel))
            p[f"b{i}"] = np.zeros(c_out)
            p[f"gamma{i}"] = np.ones(c_out)
            p[f"beta{i}"] = np.zeros(c_out)
            c_in = c_out
        n_flat = c_in * hu * hv
        p["out_w"] = rng.normal(0.0, 1.0 / np.sqrt(n_flat), (n_flat, self.n_bits))
        p["out_b"] = np.zeros(self.n_bits)
        return p

    def __call__(self, x, params) -> Tensor:
        x = as_tensor(x)
        self._check_extent(x.shape[2:])
        b = x.shape[0]
        for i in range(self.n_blocks):
            w = as_tensor(params[f"w{i}"])
            bias = ops.reshape(as_tensor(params[f"b{i}"]), (1, w.shape[1], 1, 1))
            x = ops.tanh(ops.conv2d_stride2(x, w) + bias)
            x = ops.batch_norm(x, axes=(0, 2, 3))
            x = ops.scale_shift(x, params[f"gamma{i}"], params[f"beta{i}"], axis=1)
        flat = ops.reshape(x, (b, int(np.prod(x.shape[1:]))))
        return ops.matmul(flat, params["out_w"]) + params["out_b"]


def encode_z(x, params, encoder: Encoder) -> Tensor:
    return encoder(x, params)


def bit_accuracy(logits, z) -> float:
    pred = as_tensor(logits).value > 0
    return float(np.mean(pred == (np.asarray(z) > 0.5)))
