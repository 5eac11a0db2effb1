"""A small 1-D convolutional network with explicit reverse-mode gradients.

Parameters live in one flat vector; each layer reads a view of it. The
forward pass caches what the backward pass needs, and activations of the
``taps`` layers are returned for representation losses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .._rng import rng_for


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Conv1D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def out_shape(self, shape):
        c, length = shape
        if c != self.in_ch:
            raise ShapeError(f"expects {self.in_ch} input channels, got {c}")
        out_len = (length + 2 * self.padding - self.kernel) // self.stride + 1
        if out_len < 1:
            raise ShapeError(f"input length {length} too short for kernel {self.kernel}")
        return (self.out_ch, out_len)

    def n_params(self):
        return self.out_ch * self.in_ch * self.kernel + self.out_ch


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def out_shape(self, shape):
        if self.kind not in ("relu", "tanh"):
            raise ShapeError(f"unknown nonlinearity {self.kind!r}")
        return shape

    def n_params(self):
        return 0


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def n_params(self):
        return 0


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    def out_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"expects ({self.in_features},) input, got {shape}")
        return (self.out_features,)

    def n_params(self):
        return self.out_features * self.in_features + self.out_features


LAYER_TYPES = {"Conv1D": Conv1D, "Activation": Activation, "Flatten": Flatten, "Dense": Dense}


class MicroNet:
    def __init__(self, layers, input_shape=(1, 40), taps=(), params=None, rng_seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.taps = tuple(taps)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(layer.out_shape(self.shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        if any(not 0 <= t < len(self.layers) for t in self.taps):
            raise ValueError("tap indices must refer to layers")
        self.offsets = np.cumsum([0] + [layer.n_params() for layer in self.layers])
        if params is None:
            params = self._init_params(rng_seed)
        params = np.array(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params
        self._cache = None

    @property
    def n_params(self):
        return int(self.offsets[-1])

    @property
    def n_classes(self):
        return self.shapes[-1][0]

    def _init_params(self, seed):
        rng = rng_for(seed, 5)
        p = np.zeros(self.offsets[-1])
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv1D):
                fan_in = layer.in_ch * layer.kernel
            elif isinstance(layer, Dense):
                fan_in = layer.in_features
            else:
                continue
            n_w = layer.n_params() - (layer.out_ch if isinstance(layer, Conv1D) else layer.out_features)
            bound = math.sqrt(6.0 / fan_in)
            p[self.offsets[i] : self.offsets[i] + n_w] = rng.uniform(-bound, bound, n_w)
        return p

    def layer_params(self, i, params=None):
        """(weights, bias) views of layer ``i``."""
        p = self.params if params is None else params
        layer = self.layers[i]
        chunk = p[self.offsets[i] : self.offsets[i + 1]]
        if isinstance(layer, Conv1D):
            n_w = layer.out_ch * layer.in_ch * layer.kernel
            return chunk[:n_w].reshape(layer.out_ch, layer.in_ch, layer.kernel), chunk[n_w:]
        if isinstance(layer, Dense):
            n_w = layer.out_features * layer.in_features
            return chunk[:n_w].reshape(layer.out_features, layer.in_features), chunk[n_w:]
        return None, None

    def layer_slice(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def clone(self):
        return MicroNet(self.layers, self.input_shape, self.taps, self.params.copy())

    # ------------------------------------------------------------ passes

    def forward(self, x):
        """Logits and the list of tapped activations for a batch."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2 and self.input_shape[0] == 1:
            x = x[:, None, :]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        cache = []
        taps = []
        h = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv1D):
                W, b = self.layer_params(i)
                hp = np.pad(h, ((0, 0), (0, 0), (layer.padding, layer.padding))) if layer.padding else h
                win = sliding_window_view(hp, layer.kernel, axis=2)[:, :, :: layer.stride, :]
                B, C, L, K = win.shape
                cols = win.transpose(0, 2, 1, 3).reshape(B * L, C * K)
                out = (cols @ W.reshape(layer.out_ch, -1).T).reshape(B, L, -1).transpose(0, 2, 1)
                out = out + b[None, :, None]
                cache.append((cols, hp.shape, L))
            elif isinstance(layer, Activation):
                out = np.maximum(h, 0.0) if layer.kind == "relu" else np.tanh(h)
                cache.append(out)
            elif isinstance(layer, Flatten):
                cache.append(h.shape)
                out = h.reshape(h.shape[0], -1)
            else:
                W, b = self.layer_params(i)
                cache.append(h)
                out = h @ W.T + b
            h = out
            if i in self.taps:
                taps.append(h)
        self._cache = cache
        return h, taps

    def backward(self, dlogits, dtaps=None, input_grad=False):
        """Gradient of a loss w.r.t. parameters (and optionally the input).

        ``dlogits`` and ``dtaps`` are the loss gradients w.r.t. the outputs
        of the last ``forward`` call; either may be None.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        grad = np.zeros(self.n_params)
        tap_pos = {t: j for j, t in enumerate(self.taps)}
        g = None if dlogits is None else np.asarray(dlogits, dtype=float)
        for i in range(len(self.layers) - 1, -1, -1):
            if dtaps is not None and i in tap_pos and dtaps[tap_pos[i]] is not None:
                g = dtaps[tap_pos[i]] if g is None else g + dtaps[tap_pos[i]]
            if g is None:
                continue
            layer, c = self.layers[i], self._cache[i]
            if isinstance(layer, Dense):
                W, _ = self.layer_params(i)
                sl = self.layer_slice(i)
                n_w = W.size
                grad[sl][:n_w] = (g.T @ c).ravel()
                grad[sl][n_w:] = g.sum(axis=0)
                g = g @ W
            elif isinstance(layer, Flatten):
                g = g.reshape(c)
            elif isinstance(layer, Activation):
                g = g * (c > 0) if layer.kind == "relu" else g * (1.0 - c**2)
            else:
                cols, hp_shape, L = c
                W, _ = self.layer_params(i)
                sl = self.layer_slice(i)
                B = g.shape[0]
                g2 = g.transpose(0, 2, 1).reshape(B * L, layer.out_ch)
                n_w = W.size
                grad[sl][:n_w] = (g2.T @ cols).ravel()
                grad[sl][n_w:] = g.sum(axis=(0, 2))
                if i == 0 and not input_grad:
                    g = None
                    continue
                dcols = (g2 @ W.reshape(layer.out_ch, -1)).reshape(B, L, layer.in_ch, layer.kernel)
                dhp = np.zeros(hp_shape)
                s = layer.stride
                for k in range(layer.kernel):
                    dhp[:, :, k : k + s * (L - 1) + 1 : s] += dcols[:, :, :, k].transpose(0, 2, 1)
                p = layer.padding
                g = dhp[:, :, p : hp_shape[2] - p] if p else dhp
        if input_grad:
            if g is None:
                g = np.zeros((self._batch_size(),) + self.input_shape)
            return grad, g
        return grad

    def _batch_size(self):
        c = self._cache[0]
        return c[0].shape[0] // c[2] if isinstance(c, tuple) and len(c) == 3 else c.shape[0]

    def predict(self, x, batch=1000):
        out = []
        for i in range(0, len(x), batch):
            logits, _ = self.forward(x[i : i + batch])
            out.append(logits.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    # ------------------------------------------------------- serialization

    def header(self):
        return {
            "input_shape": list(self.input_shape),
            "taps": list(self.taps),
            "n_params": self.n_params,
            "dtype": "<f8",
            "layers": [{"type": type(layer).__name__, **layer.__dict__} for layer in self.layers],
        }

    def save(self, path):
        path = Path(path)
        np.ascontiguousarray(self.params, dtype="<f8").tofile(path)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.header(), indent=2))

    @classmethod
    def load(cls, path):
        path = Path(path)
        head = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        layers = []
        for spec in head["layers"]:
            spec = dict(spec)
            layers.append(LAYER_TYPES[spec.pop("type")](**spec))
        params = np.fromfile(path, dtype=head["dtype"])
        return cls(layers, head["input_shape"], head["taps"], params)


def conv_net(channels=16, n_layers=3, kernel=5, stride=2, length=40, n_classes=10,
             nonlinearity="relu", rng_seed=0):
    """``n_layers`` strided conv blocks, flatten, dense; taps after each block."""
    layers, taps = [], []
    c_in, L = 1, length
    for _ in range(n_layers):
        pad = kernel // 2
        layers.append(Conv1D(c_in, channels, kernel, stride, pad))
        layers.append(Activation(nonlinearity))
        taps.append(len(layers) - 1)
        L = (L + 2 * pad - kernel) // stride + 1
        c_in = channels
    layers += [Flatten(), Dense(channels * L, n_classes)]
    return MicroNet(layers, (1, length), taps, rng_seed=rng_seed)
