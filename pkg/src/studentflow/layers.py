"""Invertible layers with analytic log-determinants and backward passes.

Arrays are laid out as ``(batch, channels, *spatial)``; flat vectors are the
special case with no spatial axes, so ``(batch, D)`` treats every coordinate
as a channel.

Direction convention
--------------------
``forward`` is the generative direction (latent -> data) and ``inverse`` the
density direction (data -> latent). Training differentiates the density
direction, so ``inverse`` is the pass that fills a cache and ``backward``
propagates gradients through it. Both directions return the per-row
``log|det J|`` of the map they apply.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg

__all__ = [
    "FlowError",
    "Layer",
    "ActNorm",
    "InvertibleLinear",
    "CouplingNet",
    "AffineCoupling",
    "Squeeze",
    "Split",
    "layer_forward",
    "layer_inverse",
]

SCALE_CLAMP = 5.0
ACTNORM_EPS = 1e-6


class FlowError(RuntimeError):
    """Numerical failure inside a flow; ``layer_index`` names the culprit when known."""

    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message if layer_index is None else f"layer {layer_index}: {message}")
        self.layer_index = layer_index


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    # (C,) -> (1, C, 1, ..., 1) for broadcasting against (N, C, *S)
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _spatial_size(shape) -> int:
    return int(np.prod(shape[2:], dtype=np.int64)) if len(shape) > 2 else 1


def _reduce_axes(ndim: int) -> tuple[int, ...]:
    return (0,) + tuple(range(2, ndim))


class Layer:
    """Common interface. Subclasses hold their trainable arrays in ``self.params``."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {}

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Shape of one sample after the density-direction pass."""
        return tuple(shape)

    def check_params(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise FlowError(f"non-finite parameter {self.kind}.{name}")

    def forward(self, z):
        raise NotImplementedError

    def inverse(self, x, cache=None):
        raise NotImplementedError

    def backward(self, cache, gz, glogdet):
        """Return ``(grad wrt inverse input, grads wrt params)``."""
        raise NotImplementedError

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({cfg})"


class ActNorm(Layer):
    """Per-channel affine map ``x = z * exp(log_scale) + bias``.

    Until :meth:`data_init` is called (or ``initialized`` is set) the layer
    refuses to run.
    """

    kind = "actnorm"

    def __init__(self, channels: int, initialized: bool = False):
        super().__init__()
        self.channels = channels
        self.params = {"bias": np.zeros(channels), "log_scale": np.zeros(channels)}
        self.initialized = initialized

    def config(self):
        return {"channels": self.channels, "initialized": self.initialized}

    def _ready(self):
        if not self.initialized:
            raise FlowError("ActNorm used before data-dependent initialization")
        self.check_params()

    def data_init(self, x: np.ndarray):
        """Set bias/scale so the density-direction output of ``x`` is standardized per channel."""
        import warnings

        x = np.asarray(x, dtype=float)
        if x.shape[0] < 2:
            raise ValueError("ActNorm initialization needs at least 2 rows")
        axes = _reduce_axes(x.ndim)
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        flat = std <= 0.0
        if np.any(flat):
            warnings.warn(
                f"ActNorm init: zero variance in channel(s) {np.flatnonzero(flat).tolist()}; "
                f"adding epsilon {ACTNORM_EPS}",
                RuntimeWarning,
                stacklevel=2,
            )
            std = std + flat * ACTNORM_EPS
        self.params["bias"][...] = mean
        self.params["log_scale"][...] = np.log(std)
        self.initialized = True

    def forward(self, z):
        self._ready()
        s = self.params["log_scale"]
        x = z * _channel_view(np.exp(s), z.ndim) + _channel_view(self.params["bias"], z.ndim)
        ld = _spatial_size(z.shape) * s.sum()
        return x, np.full(z.shape[0], ld)

    def inverse(self, x, cache=None):
        self._ready()
        s = self.params["log_scale"]
        inv_scale = _channel_view(np.exp(-s), x.ndim)
        z = (x - _channel_view(self.params["bias"], x.ndim)) * inv_scale
        if cache is not None:
            cache["z"] = z
            cache["inv_scale"] = inv_scale
            cache["spatial"] = _spatial_size(x.shape)
        return z, np.full(x.shape[0], -_spatial_size(x.shape) * s.sum())

    def backward(self, cache, gz, glogdet):
        z, inv_scale = cache["z"], cache["inv_scale"]
        axes = _reduce_axes(gz.ndim)
        gx = gz * inv_scale
        return gx, {
            "bias": -gx.sum(axis=axes),
            "log_scale": -(gz * z).sum(axis=axes) - cache["spatial"] * glogdet.sum(),
        }


class InvertibleLinear(Layer):
    """Channel-mixing matrix ``W = P L U`` (invertible 1x1 convolution).

    ``P`` is a fixed permutation, ``L`` unit lower triangular and ``U`` upper
    triangular including its diagonal, so ``log|det W| = sum(log|U_ii|)``.
    Only the strictly-lower part of ``lower`` and the upper part of ``upper``
    are used; the other entries always receive zero gradient.
    """

    kind = "invertible_linear"

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = c = channels
        if rng is None:
            self.perm = np.arange(c)
            lower, upper = np.eye(c), np.eye(c)
        else:
            q, _ = np.linalg.qr(rng.standard_normal((c, c)))
            p, lower, upper = scipy.linalg.lu(q)
            self.perm = np.argmax(p, axis=0)  # p[perm[j], j] == 1
        self.params = {"lower": np.tril(lower, -1), "upper": np.triu(upper)}
        self._lmask = np.tril(np.ones((c, c)), -1)
        self._umask = np.triu(np.ones((c, c)))

    def config(self):
        return {"channels": self.channels, "perm": self.perm.tolist()}

    def _perm_matrix(self):
        p = np.zeros((self.channels, self.channels))
        p[self.perm, np.arange(self.channels)] = 1.0
        return p

    def _factors(self):
        self.check_params()
        lower = self.params["lower"] * self._lmask + np.eye(self.channels)
        upper = self.params["upper"] * self._umask
        diag = np.diag(upper)
        if np.any(diag == 0.0):
            raise FlowError("singular InvertibleLinear: zero on the U diagonal")
        return self._perm_matrix(), lower, upper, diag

    def weight(self) -> np.ndarray:
        p, lower, upper, _ = self._factors()
        return p @ lower @ upper

    @staticmethod
    def _apply(m, h):
        # contract the channel axis of h with m: out[:, i, ...] = sum_j m[i, j] h[:, j, ...]
        return np.moveaxis(np.tensordot(m, h, axes=([1], [1])), 0, 1)

    def forward(self, z):
        p, lower, upper, diag = self._factors()
        x = self._apply(p @ lower @ upper, z)
        ld = _spatial_size(z.shape) * np.log(np.abs(diag)).sum()
        return x, np.full(z.shape[0], ld)

    def inverse(self, x, cache=None):
        p, lower, upper, diag = self._factors()
        w = p @ lower @ upper
        a = np.linalg.inv(w)
        z = self._apply(a, x)
        if cache is not None:
            cache.update(x=x, a=a, p=p, lower=lower, upper=upper, diag=diag,
                         spatial=_spatial_size(x.shape))
        ld = -_spatial_size(x.shape) * np.log(np.abs(diag)).sum()
        return z, np.full(x.shape[0], ld)

    def backward(self, cache, gz, glogdet):
        x, a = cache["x"], cache["a"]
        c = self.channels
        gz2 = np.moveaxis(gz, 1, -1).reshape(-1, c)
        x2 = np.moveaxis(x, 1, -1).reshape(-1, c)
        ga = gz2.T @ x2
        gx = self._apply(a.T, gz)
        gw = -a.T @ ga @ a.T
        p, lower, upper = cache["p"], cache["lower"], cache["upper"]
        g_lower = (p.T @ gw @ upper.T) * self._lmask
        g_upper = (lower.T @ p.T @ gw) * self._umask
        g_upper[np.diag_indices(c)] -= cache["spatial"] * glogdet.sum() / cache["diag"]
        return gx, {"lower": g_lower, "upper": g_upper}


_ACTIVATIONS = ("tanh", "relu")


class CouplingNet:
    """Two-hidden-layer MLP mapping the conditioning half to (shift, pre-scale).

    The output layer starts at zero so a fresh coupling is the identity.
    """

    def __init__(self, n_in: int, n_out: int, hidden: int = 64, activation: str = "tanh",
                 rng: np.random.Generator | None = None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {activation!r}")
        self.n_in, self.n_out, self.hidden, self.activation = n_in, n_out, hidden, activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "w1": rng.standard_normal((n_in, hidden)) / math.sqrt(n_in),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, hidden)) / math.sqrt(hidden),
            "b2": np.zeros(hidden),
            "w3": np.zeros((hidden, n_out)),
            "b3": np.zeros(n_out),
        }

    def _act(self, u):
        return np.tanh(u) if self.activation == "tanh" else np.maximum(u, 0.0)

    def _act_grad(self, u, h):
        return 1.0 - h * h if self.activation == "tanh" else (u > 0.0).astype(float)

    def __call__(self, a, cache=None):
        p = self.params
        u1 = a @ p["w1"] + p["b1"]
        h1 = self._act(u1)
        u2 = h1 @ p["w2"] + p["b2"]
        h2 = self._act(u2)
        out = h2 @ p["w3"] + p["b3"]
        if cache is not None:
            cache.update(a=a, u1=u1, h1=h1, u2=u2, h2=h2)
        return out

    def backward(self, cache, gout):
        p = self.params
        g = {"w3": cache["h2"].T @ gout, "b3": gout.sum(axis=0)}
        gu2 = (gout @ p["w3"].T) * self._act_grad(cache["u2"], cache["h2"])
        g["w2"] = cache["h1"].T @ gu2
        g["b2"] = gu2.sum(axis=0)
        gu1 = (gu2 @ p["w2"].T) * self._act_grad(cache["u1"], cache["h1"])
        g["w1"] = cache["a"].T @ gu1
        g["b1"] = gu1.sum(axis=0)
        return gu1 @ p["w1"].T, g


class AffineCoupling(Layer):
    """Affine coupling: one channel half conditions a shift/scale of the other.

    With ``h = channels // 2``, parity 0 conditions on channels ``[:h]`` and
    transforms ``[h:]``; parity 1 swaps the roles. In the generative
    direction ``x_b = z_b * exp(s) + t`` with ``s = clip(pre, -5, 5)``.
    """

    kind = "affine_coupling"

    def __init__(self, shape: tuple[int, ...], parity: int = 0, hidden: int = 64,
                 activation: str = "tanh", rng: np.random.Generator | None = None):
        super().__init__()
        self.shape = tuple(shape)
        c = self.shape[0]
        if c < 2:
            raise ValueError("AffineCoupling needs at least 2 channels")
        self.parity = parity % 2
        h = c // 2
        first, second = np.arange(h), np.arange(h, c)
        self.cond_idx, self.trans_idx = (first, second) if self.parity == 0 else (second, first)
        spatial = int(np.prod(self.shape[1:], dtype=np.int64)) if len(self.shape) > 1 else 1
        self.net = CouplingNet(self.cond_idx.size * spatial, 2 * self.trans_idx.size * spatial,
                               hidden, activation, rng)
        self.params = self.net.params
        self.hidden, self.activation = hidden, activation

    def config(self):
        return {"shape": list(self.shape), "parity": self.parity, "hidden": self.hidden,
                "activation": self.activation}

    def _shift_prescale(self, a, cache=None):
        n = a.shape[0]
        out = self.net(a.reshape(n, -1), cache)
        out = out.reshape((n, 2, self.trans_idx.size) + self.shape[1:])
        return out[:, 0], out[:, 1]

    def _sum_rows(self, v):
        return v.reshape(v.shape[0], -1).sum(axis=1)

    def forward(self, z):
        self.check_params()
        a, b = z[:, self.cond_idx], z[:, self.trans_idx]
        t, pre = self._shift_prescale(a)
        s = np.clip(pre, -SCALE_CLAMP, SCALE_CLAMP)
        x = np.empty_like(z)
        x[:, self.cond_idx] = a
        x[:, self.trans_idx] = b * np.exp(s) + t
        return x, self._sum_rows(s)

    def inverse(self, x, cache=None):
        self.check_params()
        a, b = x[:, self.cond_idx], x[:, self.trans_idx]
        net_cache = {} if cache is not None else None
        t, pre = self._shift_prescale(a, net_cache)
        s = np.clip(pre, -SCALE_CLAMP, SCALE_CLAMP)
        e = np.exp(-s)
        zb = (b - t) * e
        z = np.empty_like(x)
        z[:, self.cond_idx] = a
        z[:, self.trans_idx] = zb
        if cache is not None:
            cache.update(net=net_cache, e=e, zb=zb, inside=np.abs(pre) < SCALE_CLAMP)
        return z, -self._sum_rows(s)

    def backward(self, cache, gz, glogdet):
        e, zb = cache["e"], cache["zb"]
        gzb = gz[:, self.trans_idx]
        gxb = gzb * e
        gt = -gxb
        gl = glogdet.reshape((-1,) + (1,) * (zb.ndim - 1))
        gpre = (-gzb * zb - gl) * cache["inside"]
        n = gz.shape[0]
        gout = np.stack([gt, gpre], axis=1).reshape(n, -1)
        ga_flat, grads = self.net.backward(cache["net"], gout)
        gx = np.empty_like(gz)
        gx[:, self.cond_idx] = gz[:, self.cond_idx] + ga_flat.reshape(gz[:, self.cond_idx].shape)
        gx[:, self.trans_idx] = gxb
        return gx, grads


class Squeeze(Layer):
    """Space-to-depth: ``(C, H, W) -> (4C, H/2, W/2)`` in the density direction."""

    kind = "squeeze"

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ValueError(f"Squeeze needs even height and width, got {shape}")
        return (4 * c, h // 2, w // 2)

    @staticmethod
    def squeeze(x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"Squeeze needs even height and width, got {x.shape[1:]}")
        y = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
        return y.reshape(n, 4 * c, h // 2, w // 2)

    @staticmethod
    def unsqueeze(z):
        n, c4, h, w = z.shape
        c = c4 // 4
        y = z.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
        return y.reshape(n, c, 2 * h, 2 * w)

    def forward(self, z):
        return self.unsqueeze(z), np.zeros(z.shape[0])

    def inverse(self, x, cache=None):
        return self.squeeze(x), np.zeros(x.shape[0])

    def backward(self, cache, gz, glogdet):
        return self.unsqueeze(gz), {}


class Split(Layer):
    """Factor out the second half of the channels straight to the base.

    The model, not this layer, routes the factored half: ``split`` returns
    ``(kept, factored)`` and ``merge`` reverses it.
    """

    kind = "split"

    def out_shape(self, shape):
        return (shape[0] - shape[0] // 2,) + tuple(shape[1:])

    def factored_shape(self, shape):
        return (shape[0] // 2,) + tuple(shape[1:])

    def split(self, x):
        k = x.shape[1] - x.shape[1] // 2
        return x[:, :k], x[:, k:]

    @staticmethod
    def merge(kept, factored):
        return np.concatenate([kept, factored], axis=1)


def layer_forward(layer: Layer, z):
    """Generative pass of one layer: ``(x, log|det dx/dz|)``."""
    return layer.forward(np.asarray(z, dtype=float))


def layer_inverse(layer: Layer, x, cache: dict | None = None):
    """Density pass of one layer: ``(z, log|det dz/dx|)``; fills ``cache`` for backward."""
    return layer.inverse(np.asarray(x, dtype=float), cache)
