"""Procedural normal maps used by tests, benchmarks and the ``synth`` command."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .normal_field import NormalField

KINDS = ("flat", "affine", "isotropic", "brushed", "scratch", "bumpy")


def _from_slopes(xy: np.ndarray) -> NormalField:
    z = np.ones(xy.shape[:2] + (1,))
    return NormalField.from_vectors(np.concatenate([xy, z], axis=-1))


def flat(size: int = 64) -> NormalField:
    return NormalField(np.zeros((size, size, 2)))


def affine(size: int = 64, matrix=None, offset=(-0.1, -0.05)):
    """n(u) = offset + matrix @ u on texel centers (no longer affine across the wrap seam).

    The default matrix is scaled by 64 / size so every map spans the same normals.
    """
    if matrix is None:
        matrix = np.array([[0.004, 0.001], [-0.002, 0.003]]) * (64.0 / size)
    j, i = np.mgrid[0:size, 0:size].astype(np.float64)
    u = np.stack([i, j], axis=-1)
    return NormalField(np.asarray(offset) + u @ np.asarray(matrix).T)


def _noise(size, sigma, seed, aniso=(1.0, 1.0)):
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((size, size, 2))
    sig = (sigma * aniso[1], sigma * aniso[0])
    out = np.stack([gaussian_filter(raw[..., c], sig, mode="wrap") for c in range(2)], axis=-1)
    return out / np.sqrt(np.mean(np.sum(out ** 2, axis=-1)) / 2.0)


def isotropic(size: int = 256, sigma: float = 0.5, rms: float = 0.25, seed: int = 7) -> NormalField:
    """Gaussian-filtered white-noise slopes, rescaled to a per-component rms."""
    return _from_slopes(rms * _noise(size, sigma, seed))


def brushed(size: int = 256, sigma: float = 0.7, stretch: float = 3.0, rms: float = 0.25,
            seed: int = 11) -> NormalField:
    """Noise elongated along x; slopes mostly vary across the brushing direction."""
    xy = _noise(size, sigma, seed, aniso=(stretch, 1.0))
    xy[..., 0] *= 0.3
    return _from_slopes(rms * xy)


def scratch(size: int = 256, count: int = 40, width: float = 0.7, depth: float = 0.5,
            seed: int = 3) -> NormalField:
    """Flat base with sparse straight grooves of random orientation."""
    rng = np.random.default_rng(seed)
    j, i = np.mgrid[0:size, 0:size].astype(np.float64)
    xy = np.zeros((size, size, 2))
    for _ in range(count):
        theta = rng.uniform(0, np.pi)
        c = rng.uniform(0, size, 2)
        nrm = np.array([-np.sin(theta), np.cos(theta)])
        d = (i - c[0]) * nrm[0] + (j - c[1]) * nrm[1]
        d = (d + size / 2) % size - size / 2
        profile = depth * (d / width) * np.exp(-0.5 * (d / width) ** 2)
        xy += profile[..., None] * nrm
    return _from_slopes(xy)


def bumpy(size: int = 256, period: float = 4.0, amplitude: float = 0.6) -> NormalField:
    """High-frequency sinusoidal bumps, a few texels per period."""
    j, i = np.mgrid[0:size, 0:size].astype(np.float64)
    k = 2 * np.pi / period
    xy = amplitude * np.stack([np.cos(k * i) * np.sin(k * j), np.sin(k * i) * np.cos(k * j)], axis=-1)
    return _from_slopes(xy)


def make(kind: str, size: int = 256, seed: int = 7) -> NormalField:
    if kind == "flat":
        return flat(size)
    if kind == "affine":
        return affine(size)
    if kind == "isotropic":
        return isotropic(size, seed=seed)
    if kind == "brushed":
        return brushed(size, seed=seed)
    if kind == "scratch":
        return scratch(size, seed=seed)
    if kind == "bumpy":
        return bumpy(size)
    raise ValueError(f"unknown field kind {kind!r}; expected one of {KINDS}")
