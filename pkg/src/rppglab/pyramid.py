"""Laplacian pyramid split and the luminance-suppressed chrominance carrier.

Frames are decomposed into high-frequency detail layers plus a low-frequency
base; edits touch only the base, so texture and edge content is preserved
exactly. Decomposition and reconstruction share one set of array ops, which
makes the round trip exact to floating-point precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

K_PYR = 4

# Rec.601 luma weights; they sum to one, so subtracting the per-pixel luma
# from every channel leaves a carrier that is exactly luma-orthogonal.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class PyramidDecomposition:
    high_layers: list          # h^1 .. h^{K-1}, descending resolution
    low_base: np.ndarray       # l^K


# Blurs are renormalized by the blurred-ones mass so that constant inputs
# pass through exactly, including at frame borders and through zero stuffing.
_mass_cache = {}


def _blur_mass(h, w):
    key = ("down", h, w)
    if key not in _mass_cache:
        m = ad.blur2(ad.DiffValue(np.ones((1, h, w, 1)))).data
        m.setflags(write=False)
        _mass_cache[key] = m
    return _mass_cache[key]


def _up_mass(h, w):
    key = ("up", h, w)
    if key not in _mass_cache:
        m = ad.blur2(ad.up2zero(ad.DiffValue(np.ones((1, h, w, 1))))).data
        m.setflags(write=False)
        _mass_cache[key] = m
    return _mass_cache[key]


def _down(x):
    _, h, w, _ = x.shape
    return ad.down2(ad.divide(ad.blur2(x), _blur_mass(h, w)))


def _up(x):
    _, h, w, _ = x.shape
    return ad.divide(ad.blur2(ad.up2zero(x)), _up_mass(h, w))


def laplacian_decompose(frames, k_pyr=K_PYR) -> PyramidDecomposition:
    """Split (T, H, W, 3) frames into detail layers plus a low base.

    H and W must be divisible by 2^(k_pyr - 1).
    """
    arr = np.asarray(frames, dtype=np.float64)
    t, h, w, _ = arr.shape
    div = 1 << (k_pyr - 1)
    if h % div or w % div:
        raise ValueError(f"frame size {h}x{w} not divisible by {div} for depth {k_pyr}")
    g = ad.DiffValue(arr)
    highs = []
    for _ in range(k_pyr - 1):
        gd = _down(g)
        highs.append(ad.subtract(g, _up(gd)).data)
        g = gd
    return PyramidDecomposition(highs, g.data)


def laplacian_reconstruct(pd: PyramidDecomposition) -> np.ndarray:
    g = ad.DiffValue(pd.low_base)
    for hl in reversed(pd.high_layers):
        g = ad.add(_up(g), ad.DiffValue(hl))
    return g.data


def reconstruct_graph(low_base, high_layers):
    """Differentiable reconstruction from a DiffValue low base and constant
    high layers; used when gradients must reach the edited base."""
    g = low_base if isinstance(low_base, ad.DiffValue) else ad.DiffValue(low_base)
    for hl in reversed(high_layers):
        g = ad.add(_up(g), ad.DiffValue(hl))
    return g


def upsample_to_full(x, k_pyr=K_PYR):
    """Apply the pyramid's up-chain (k_pyr - 1 times); maps a low-base
    perturbation to its full-resolution footprint."""
    g = x if isinstance(x, ad.DiffValue) else ad.DiffValue(np.asarray(x, dtype=np.float64))
    for _ in range(k_pyr - 1):
        g = _up(g)
    return g if isinstance(x, ad.DiffValue) else g.data


def luminance(img):
    """Per-pixel luma Y = w . rgb for (..., 3) arrays."""
    return np.tensordot(np.asarray(img, dtype=np.float64), LUMA_WEIGHTS, axes=([-1], [0]))


def luminance_suppress(img):
    """Chrominance carrier: subtract the per-pixel luma from every channel.

    Gray pixels map to zero; the result is a projector fixed point.
    """
    arr = np.asarray(img, dtype=np.float64)
    return arr - luminance(arr)[..., None]


def luminance_suppress_graph(x):
    """Engine-side luminance_suppress on a (..., 3) DiffValue."""
    w = LUMA_WEIGHTS.reshape((1,) * (len(x.shape) - 1) + (3,))
    y = ad.sum(ad.multiply(x, w), axis=len(x.shape) - 1, keepdims=True)
    return ad.subtract(x, y)
