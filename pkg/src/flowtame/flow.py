"""Invertible coupling flow with a trainable diagonal-Gaussian latent prior.

The model is a stack of affine coupling layers: each layer passes the masked
coordinates through unchanged and applies an elementwise affine map to the
rest, with scale and shift predicted from the masked part by small MLPs. The
Jacobian is triangular, so the log-determinant is the sum of the active
log-scales, and the inverse is algebraically exact. Exact log-likelihood
follows from the change-of-variables rule: prior log-density of the inverse
image plus the inverse map's log-determinant.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ConfigError, InvalidCountError, NonFiniteError, ShapeError

LOG_TWO_PI = math.log(2.0 * math.pi)

CHECKPOINT_VERSION = "flow-checkpoint/1"


def _as_batch_node(x, dim: int, what: str) -> Node:
    """Coerce an array (or Node) to a finite (n, dim) batch node."""
    node = x if isinstance(x, Node) else ad.constant(np.atleast_2d(x))
    if node.value.ndim != 2 or node.value.shape[1] != dim:
        raise ShapeError(f"{what}: expected shape (n, {dim}), got {node.value.shape}")
    if not np.all(np.isfinite(node.value)):
        raise NonFiniteError(f"{what}: input contains NaN or Inf")
    return node


def _ones_column(n: int) -> Node:
    return ad.constant(np.ones((n, 1)))


class CouplingNet:
    """Conditioner MLP: two tanh hidden layers, linear output.

    Biases are row vectors; they are broadcast across the batch with an
    explicit ones-column matmul, which also gives the correct (column-sum)
    gradient without any array-with-array broadcasting.
    """

    def __init__(self, params: list[Parameter]):
        # W1, b1, W2, b2, W3, b3
        self.params = params

    def __call__(self, x: Node) -> Node:
        w1, b1, w2, b2, w3, b3 = (p.node for p in self.params)
        ones = _ones_column(x.value.shape[0])
        h = ad.tanh(ad.matmul(x, w1) + ad.matmul(ones, b1))
        h = ad.tanh(ad.matmul(h, w2) + ad.matmul(ones, b2))
        return ad.matmul(h, w3) + ad.matmul(ones, b3)


class CouplingLayer:
    """One affine coupling step.

    ``mask`` marks the coordinates that pass through unchanged (1 = pass).
    The raw log-scale is squashed through ``clamp * tanh(s / clamp)`` so its
    magnitude stays below ``scale_clamp``, which keeps the layer invertible
    and the log-determinant bounded.
    """

    def __init__(self, mask: np.ndarray, scale_net: CouplingNet,
                 shift_net: CouplingNet, scale_clamp: float):
        mask = np.asarray(mask, dtype=np.float64)
        if not (np.any(mask == 0.0) and np.any(mask == 1.0)):
            raise ConfigError("mask needs at least one 0 and one 1 entry")
        self.mask = mask
        self.scale_net = scale_net
        self.shift_net = shift_net
        self.scale_clamp = float(scale_clamp)

    def _conditioner(self, passthrough: Node) -> tuple[Node, Node]:
        s_raw = self.scale_net(passthrough)
        s = ad.tanh(s_raw / self.scale_clamp) * self.scale_clamp
        t = self.shift_net(passthrough)
        return s, t

    def _masks(self, n: int) -> tuple[Node, Node]:
        tiled = np.tile(self.mask, (n, 1))
        return ad.constant(tiled), ad.constant(1.0 - tiled)

    def _row_sums(self, active_scales: Node) -> Node:
        return ad.matmul(active_scales, np.ones((self.mask.size, 1)))

    def forward(self, x: Node) -> tuple[Node, Node]:
        m, inv = self._masks(x.value.shape[0])
        x_pass = x * m
        s, t = self._conditioner(x_pass)
        y = x_pass + inv * (x * ad.exp(s) + t)
        return y, self._row_sums(inv * s)

    def inverse(self, y: Node) -> tuple[Node, Node]:
        m, inv = self._masks(y.value.shape[0])
        y_pass = y * m
        s, t = self._conditioner(y_pass)
        x = y_pass + inv * ((y - t) * ad.exp(ad.neg(s)))
        return x, ad.neg(self._row_sums(inv * s))


class Prior:
    """Diagonal-Gaussian latent prior with trainable mean and log-scale."""

    def __init__(self, mu: Parameter, log_sigma: Parameter):
        self.mu = mu
        self.log_sigma = log_sigma

    @property
    def dim(self) -> int:
        return self.mu.value.shape[1]

    def log_prob(self, z) -> Node:
        """Per-row sum of univariate Gaussian log-densities, shape (n, 1)."""
        z = _as_batch_node(z, self.dim, "prior.log_prob")
        n = z.value.shape[0]
        ones = _ones_column(n)
        mu = ad.matmul(ones, self.mu.node)
        ls = ad.matmul(ones, self.log_sigma.node)
        u = (z - mu) * ad.exp(ad.neg(ls))
        per_element = ad.square(u) * (-0.5) - ls - (0.5 * LOG_TWO_PI)
        return ad.matmul(per_element, np.ones((self.dim, 1)))


class FlowModel:
    """Ordered coupling layers plus the latent prior; owns all parameters."""

    def __init__(self, layers: list[CouplingLayer], prior: Prior, dim: int,
                 hidden_width: int, scale_clamp: float,
                 version: str = CHECKPOINT_VERSION):
        self.layers = layers
        self.prior = prior
        self.dim = dim
        self.hidden_width = hidden_width
        self.scale_clamp = scale_clamp
        self.version = version

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.extend(layer.scale_net.params)
            out.extend(layer.shift_net.params)
        out.append(self.prior.mu)
        out.append(self.prior.log_sigma)
        return out

    def forward(self, z) -> tuple[Node, Node]:
        """Latent -> data map; returns (x, log|det dx/dz|) with logdet (n, 1)."""
        x = _as_batch_node(z, self.dim, "forward")
        logdet = ad.constant(np.zeros((x.value.shape[0], 1)))
        for layer in self.layers:
            x, ld = layer.forward(x)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, x) -> tuple[Node, Node]:
        """Data -> latent map; returns (z, log|det dz/dx|)."""
        z = _as_batch_node(x, self.dim, "inverse")
        logdet = ad.constant(np.zeros((z.value.shape[0], 1)))
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z)
            logdet = logdet + ld
        return z, logdet

    def log_prob(self, x) -> Node:
        """Exact log-density of each row, shape (n, 1); differentiable."""
        z, logdet = self.inverse(x)
        return self.prior.log_prob(z) + logdet

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n latent points from the prior and push them forward."""
        if n <= 0:
            raise InvalidCountError(f"sample count must be positive, got {n}")
        mu = self.prior.mu.value
        sigma = np.exp(self.prior.log_sigma.value)
        z = mu + sigma * rng.standard_normal((n, self.dim))
        with ad.no_grad():
            x, _ = self.forward(z)
        return x.value

    def clone(self) -> "FlowModel":
        """Deep-copy parameter values into a structurally identical model."""
        other = build_model(self.dim, self.n_layers, self.hidden_width,
                            np.random.default_rng(0), scale_clamp=self.scale_clamp)
        for src, dst in zip(self.params, other.params):
            dst.node.value = src.node.value.copy()
            dst.node.grad = np.zeros_like(src.node.value)
        return other


def _init_net(prefix: str, dim: int, hidden: int, rng: np.random.Generator) -> CouplingNet:
    # Final layer zeroed so a fresh flow is exactly the identity map.
    shapes = [
        ("W1", rng.standard_normal((dim, hidden)) / math.sqrt(dim)),
        ("b1", np.zeros((1, hidden))),
        ("W2", rng.standard_normal((hidden, hidden)) / math.sqrt(hidden)),
        ("b2", np.zeros((1, hidden))),
        ("W3", np.zeros((hidden, dim))),
        ("b3", np.zeros((1, dim))),
    ]
    return CouplingNet([Parameter(f"{prefix}.{name}", Node(value))
                        for name, value in shapes])


def build_model(dim: int, n_layers: int, hidden_width: int,
                rng: np.random.Generator, scale_clamp: float = 3.0) -> FlowModel:
    """Construct a near-identity flow with parity-alternating masks."""
    if dim < 2:
        raise ConfigError("dim must be at least 2 (a mask needs both values)")
    if n_layers < 2 or n_layers % 2 != 0:
        raise ConfigError(f"n_layers must be even and >= 2, got {n_layers}")
    if hidden_width < 1:
        raise ConfigError(f"hidden_width must be >= 1, got {hidden_width}")
    if scale_clamp <= 0:
        raise ConfigError(f"scale_clamp must be positive, got {scale_clamp}")

    layers = []
    for i in range(n_layers):
        mask = np.array([(j + i) % 2 == 0 for j in range(dim)], dtype=np.float64)
        scale = _init_net(f"layer{i}.scale", dim, hidden_width, rng)
        shift = _init_net(f"layer{i}.shift", dim, hidden_width, rng)
        layers.append(CouplingLayer(mask, scale, shift, scale_clamp))

    prior = Prior(Parameter("prior.mu", Node(np.zeros((1, dim)))),
                  Parameter("prior.log_sigma", Node(np.zeros((1, dim)))))
    return FlowModel(layers, prior, dim, hidden_width, scale_clamp)
