"""A self-contained MNIST-1D-style generator: 10 classes on 40 samples.

Each class has a fixed smooth template. An example is its class template
scaled by a random factor, circularly shifted, corrupted with additive
Gaussian noise and finally smoothed with a Gaussian kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .._rng import rng_for

LENGTH = 40
N_CLASSES = 10
_TEMPLATE_SEED = 20241115


@dataclass(frozen=True)
class Example1D:
    signal: np.ndarray
    label: int

    def __post_init__(self):
        if np.shape(self.signal) != (LENGTH,):
            raise ValueError(f"signal must have exactly {LENGTH} entries")
        if not 0 <= self.label < N_CLASSES:
            raise ValueError("label must be in 0..9")


@dataclass(frozen=True)
class GeneratorConfig:
    max_shift: int = 4
    scale_range: tuple = (0.7, 1.3)
    noise_sd: float = 0.6
    smooth_sigma: float = 1.0
    template_bumps: int = 4


@dataclass
class Dataset:
    x: np.ndarray  # (n, 40)
    y: np.ndarray  # (n,)

    def __len__(self):
        return self.y.shape[0]

    def __getitem__(self, idx):
        return Dataset(self.x[idx], self.y[idx])

    def examples(self):
        return [Example1D(self.x[i].copy(), int(self.y[i])) for i in range(len(self))]

    def tobytes(self):
        return self.x.tobytes() + self.y.tobytes()


def templates(cfg=GeneratorConfig()):
    """Class templates: sums of Gaussian bumps, unit RMS, zero mean."""
    rng = np.random.default_rng(_TEMPLATE_SEED)
    grid = np.arange(LENGTH)
    out = np.zeros((N_CLASSES, LENGTH))
    for k in range(N_CLASSES):
        centers = rng.uniform(4, LENGTH - 4, cfg.template_bumps)
        widths = rng.uniform(1.5, 4.0, cfg.template_bumps)
        amps = rng.choice([-1.0, 1.0], cfg.template_bumps) * rng.uniform(0.5, 1.5, cfg.template_bumps)
        t = sum(a * np.exp(-0.5 * ((grid - c) / w) ** 2) for a, c, w in zip(amps, centers, widths))
        t -= t.mean()
        out[k] = t / np.sqrt(np.mean(t**2))
    return out


def generate_dataset(n, rng_seed, cfg=GeneratorConfig()):
    """``n`` examples with balanced labels (class counts differ by at most 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_for(rng_seed, 11)
    tmpl = templates(cfg)
    y = rng.permutation(np.arange(n) % N_CLASSES)
    scale = rng.uniform(*cfg.scale_range, size=n)
    shift = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=n)
    noise = rng.standard_normal((n, LENGTH))
    x = tmpl[y] * scale[:, None]
    idx = (np.arange(LENGTH)[None, :] - shift[:, None]) % LENGTH
    x = np.take_along_axis(x, idx, axis=1) + cfg.noise_sd * noise
    if cfg.smooth_sigma > 0:
        x = gaussian_filter1d(x, cfg.smooth_sigma, axis=1, mode="wrap")
    return Dataset(x, y.astype(np.int64))


def nearest_template(x, cfg=GeneratorConfig()):
    """Classify by best normalized correlation with any circular shift of a template."""
    tmpl = templates(cfg)
    if cfg.smooth_sigma > 0:
        tmpl = gaussian_filter1d(tmpl, cfg.smooth_sigma, axis=1, mode="wrap")
    shifted = np.stack([np.roll(tmpl, s, axis=1) for s in range(-cfg.max_shift, cfg.max_shift + 1)])
    shifted /= np.linalg.norm(shifted, axis=2, keepdims=True)
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    scores = np.einsum("nl,skl->nsk", xn, shifted).max(axis=1)
    return scores.argmax(axis=1)
