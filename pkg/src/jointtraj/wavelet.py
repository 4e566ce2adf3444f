"""Orthonormal periodized 2D Daubechies-4 wavelet transform (8-tap filters).

Each level is an explicit orthogonal matrix, so the inverse transform is the
transpose and gradients pass through it unchanged.
"""

import functools

import numpy as np

# scaling filter of the 4-vanishing-moment Daubechies wavelet ("db4")
DB4 = np.array([
    0.2303778133088965, 0.7148465705529157, 0.6308807679298589, -0.027983769416859854,
    -0.18703481171909309, 0.030841381835560764, 0.0328830116668852, -0.010597401785069032,
])
LEVELS = 3


def n_subbands(levels=LEVELS):
    return 1 + 3 * levels


@functools.lru_cache(maxsize=32)
def _level_matrix(n):
    """``[H; G]`` analysis matrix for a periodic signal of even length ``n``."""
    h = DB4
    g = h[::-1] * (-1.0) ** np.arange(len(h))
    m = np.zeros((n, n))
    for k in range(n // 2):
        cols = (2 * k + 1 - len(h) // 2 + np.arange(len(h))) % n
        np.add.at(m[k], cols, h)
        np.add.at(m[n // 2 + k], cols, g)
    m.setflags(write=False)
    return m


def padded_shape(shape, levels=LEVELS):
    q = 2**levels
    return tuple(-(-n // q) * q for n in shape)


def forward(x, levels=LEVELS):
    """Wavelet coefficients in pyramid layout (same shape as ``x``)."""
    c = np.array(x, dtype=np.complex128)
    n0, n1 = c.shape[-2:]
    for lev in range(levels):
        s0, s1 = n0 >> lev, n1 >> lev
        a, b = _level_matrix(s0), _level_matrix(s1)
        c[..., :s0, :s1] = a @ c[..., :s0, :s1] @ b.T
    return c


def inverse(c, levels=LEVELS):
    x = np.array(c, dtype=np.complex128)
    n0, n1 = x.shape[-2:]
    for lev in reversed(range(levels)):
        s0, s1 = n0 >> lev, n1 >> lev
        a, b = _level_matrix(s0), _level_matrix(s1)
        x[..., :s0, :s1] = a.T @ x[..., :s0, :s1] @ b
    return x


@functools.lru_cache(maxsize=32)
def subband_labels(shape, levels=LEVELS):
    """Integer map assigning every coefficient to a subband.

    0 is the coarsest approximation; detail band ``b`` (0: low-high, 1:
    high-low, 2: high-high) of level ``l`` (1 = finest) is ``1 + 3 (l-1) + b``.
    """
    n0, n1 = shape
    lab = np.zeros(shape, dtype=np.int64)
    for lev in range(1, levels + 1):
        s0, s1 = n0 >> (lev - 1), n1 >> (lev - 1)
        h0, h1 = s0 // 2, s1 // 2
        base = 1 + 3 * (lev - 1)
        lab[:h0, h1:s1] = base
        lab[h0:s0, :h1] = base + 1
        lab[h0:s0, h1:s1] = base + 2
    lab.setflags(write=False)
    return lab
