"""Flow model: an ordered stack of invertible layers on top of a base distribution."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .base import BaseDistribution, make_base
from .layers import (
    ActNorm,
    AffineCoupling,
    FlowError,
    InvertibleLinear,
    Layer,
    Split,
    Squeeze,
)
from .special import make_rng

__all__ = [
    "FlowModel",
    "LayerTape",
    "build_flow",
    "model_log_likelihood",
    "model_backward",
    "model_sample",
]


@dataclass
class LayerTape:
    """Activations from one density pass, consumed by :meth:`FlowModel.backward`."""

    version: int
    caches: list = field(default_factory=list)
    latent: np.ndarray | None = None
    factored_sizes: list = field(default_factory=list)
    input_grad: np.ndarray | None = None
    used: bool = False


class FlowModel:
    """``X = f(Z)`` with ``Z`` drawn from ``base``.

    ``layers`` are stored in density order: ``layers[0]`` is applied first
    when mapping data to the latent space. ``Split`` layers send half of the
    channels directly to the latent vector; the base distribution sees the
    concatenation ``[factored_1, ..., factored_k, final]`` flattened per row.
    """

    def __init__(self, layers: list[Layer], base: BaseDistribution, input_shape):
        self.layers = list(layers)
        self.base = base
        self.input_shape = tuple(int(s) for s in input_shape)
        self.version = 0
        self.seed: int | None = None
        self.spec: dict = {}
        self._latent_shapes()  # validates the layer stack against input_shape
        if self.dim != base.dim:
            raise ValueError(f"base dim {base.dim} != data dim {self.dim}")

    @property
    def dim(self) -> int:
        return int(np.prod(self.input_shape))

    def _latent_shapes(self):
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            if isinstance(layer, Split):
                shapes.append(layer.factored_shape(shape))
            shape = layer.out_shape(shape)
        shapes.append(shape)
        return shapes

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array, keyed ``"<layer>.<name>"``."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i}.{name}"] = p
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def mark_updated(self):
        """Invalidate outstanding tapes after an in-place parameter change."""
        self.version += 1

    @property
    def initialized(self) -> bool:
        return all(l.initialized for l in self.layers if isinstance(l, ActNorm))

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            if x.ndim == 2 and x.shape[1] == self.dim:
                x = x.reshape((x.shape[0],) + self.input_shape)
            else:
                raise ValueError(f"expected rows of shape {self.input_shape}, got {x.shape[1:]}")
        if not np.all(np.isfinite(x)):
            raise FlowError("non-finite input")
        return x

    def initialize(self, x) -> None:
        """Data-dependent ActNorm initialization using the batch ``x``."""
        h = self._check_input(x)
        for layer in self.layers:
            if isinstance(layer, Split):
                h, _ = layer.split(h)
                continue
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.data_init(h)
            h, _ = layer.inverse(h)
        self.mark_updated()

    def transform(self, x, tape: LayerTape | None = None):
        """Map data to latent rows; returns ``(z, sum of log-dets)``."""
        h = self._check_input(x)
        n = h.shape[0]
        logdet = np.zeros(n)
        factored = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Split):
                h, f = layer.split(h)
                factored.append(f.reshape(n, -1))
                if tape is not None:
                    tape.caches.append(None)
                continue
            cache = {} if tape is not None else None
            try:
                h, ld = layer.inverse(h, cache)
            except FlowError as err:
                raise FlowError(str(err), i) from None
            if tape is not None:
                tape.caches.append(cache)
            if not (np.all(np.isfinite(h)) and np.all(np.isfinite(ld))):
                raise FlowError("non-finite activation", i)
            logdet += ld
        z = np.concatenate(factored + [h.reshape(n, -1)], axis=1)
        if tape is not None:
            tape.factored_sizes = [f.shape[1] for f in factored]
        return z, logdet

    def log_likelihood(self, x, tape: LayerTape | None = None) -> np.ndarray:
        """Exact per-row log-density ``log p_Z(f^-1(x)) + sum log|det|``."""
        z, logdet = self.transform(x, tape)
        ll = self.base.log_prob(z) + logdet
        if tape is not None:
            tape.latent = z
        if not np.all(np.isfinite(ll)):
            raise FlowError("non-finite log-likelihood", len(self.layers))
        return ll

    def new_tape(self) -> LayerTape:
        return LayerTape(version=self.version)

    def backward(self, tape: LayerTape, dloss_dll) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dloss_dll * log_likelihood)`` for every parameter.

        The input gradient is left in ``tape.input_grad``. A tape can be used
        once, and only while the parameters are unchanged.
        """
        if tape.used or tape.version != self.version or tape.latent is None:
            raise FlowError("stale tape: parameters changed or tape already consumed")
        tape.used = True
        g = np.asarray(dloss_dll, dtype=float)
        z = tape.latent
        n = z.shape[0]
        gz = self.base.grad_log_prob(z) * g[:, None]
        offsets = np.cumsum([0] + tape.factored_sizes)
        pieces = [gz[:, offsets[k]:offsets[k + 1]] for k in range(len(tape.factored_sizes))]
        shapes = self._latent_shapes()
        gh = gz[:, offsets[-1]:].reshape((n,) + shapes[-1])
        grads = {}
        split_k = len(pieces)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if isinstance(layer, Split):
                split_k -= 1
                gf = pieces[split_k].reshape((n,) + shapes[split_k])
                gh = layer.merge(gh, gf)
                continue
            gh, pg = layer.backward(tape.caches[i], gh, g)
            for name, val in pg.items():
                grads[f"{i}.{name}"] = val
        tape.input_grad = gh
        return grads

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` data rows: ``x = f(z)`` with ``z ~ base``."""
        z = self.base.sample(n, rng)
        return self.generate(z)

    def generate(self, z) -> np.ndarray:
        """Push latent rows through the generative direction."""
        z = np.asarray(z, dtype=float)
        n = z.shape[0]
        shapes = self._latent_shapes()
        sizes = [int(np.prod(s)) for s in shapes]
        offsets = np.cumsum([0] + sizes)
        pieces = [z[:, offsets[k]:offsets[k + 1]].reshape((n,) + shapes[k]) for k in range(len(shapes))]
        h = pieces.pop()
        for layer in reversed(self.layers):
            if isinstance(layer, Split):
                h = layer.merge(h, pieces.pop())
                continue
            h, _ = layer.forward(h)
        return h.reshape((n,) + self.input_shape)


def model_log_likelihood(model: FlowModel, x, tape: LayerTape | None = None):
    return model.log_likelihood(x, tape)


def model_backward(model: FlowModel, tape: LayerTape, dloss_dll):
    return model.backward(tape, dloss_dll)


def model_sample(model: FlowModel, n: int, rng: np.random.Generator):
    return model.sample(n, rng)


def build_flow(input_shape, base: str = "gaussian", nu: float | None = None, K: int = 4,
               L: int = 1, hidden: int = 64, activation: str = "tanh", seed: int = 0,
               actnorm: bool = True) -> FlowModel:
    """Glow-style flow.

    Flat data ``(D,)`` gets ``K`` steps of ActNorm -> InvertibleLinear ->
    AffineCoupling (``L`` must be 1). Image data ``(C, H, W)`` gets ``L``
    levels, each a Squeeze, ``K`` steps, then a Split (except the last level).
    """
    input_shape = tuple(int(s) for s in input_shape)
    rng = make_rng(seed, 0x5EED)
    layers: list[Layer] = []

    def add_steps(shape):
        for k in range(K):
            if actnorm:
                layers.append(ActNorm(shape[0]))
            layers.append(InvertibleLinear(shape[0], rng))
            layers.append(AffineCoupling(shape, k % 2, hidden, activation, rng))

    if len(input_shape) == 1:
        if L != 1:
            raise ValueError("multi-scale levels (L > 1) need image-shaped input")
        add_steps(input_shape)
    elif len(input_shape) == 3:
        shape = input_shape
        for level in range(L):
            sq = Squeeze()
            layers.append(sq)
            shape = sq.out_shape(shape)
            add_steps(shape)
            if level < L - 1:
                sp = Split()
                layers.append(sp)
                shape = sp.out_shape(shape)
    else:
        raise ValueError(f"input_shape must be (D,) or (C, H, W), got {input_shape}")
    dim = int(np.prod(input_shape))
    model = FlowModel(layers, make_base(base, dim, nu), input_shape)
    model.seed = seed
    model.spec = {"input_shape": list(input_shape), "base": base,
                  "nu": None if nu is None else (math.inf if math.isinf(nu) else float(nu)),
                  "K": K, "L": L, "hidden": hidden, "activation": activation, "seed": seed,
                  "actnorm": actnorm}
    return model
