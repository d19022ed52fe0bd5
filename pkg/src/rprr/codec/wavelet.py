"""Reversible integer 5/3 lifting wavelet with symmetric boundary extension."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _neighbours(even, d_len):
    """Right even neighbour of every odd sample (mirrored at the end)."""
    return np.concatenate([even[..., 1:], even[..., -1:]], axis=-1)[..., :d_len]


def _d_pair(d, s_len):
    """``d[n-1]`` and ``d[n]`` for every even position, mirrored at both ends."""
    left = np.concatenate([d[..., :1], d], axis=-1)[..., :s_len]
    right = np.concatenate([d, d[..., -1:]], axis=-1)[..., :s_len]
    return left, right


def forward_1d(x, axis=-1, integer=True):
    """Split ``x`` along ``axis`` into (low, high) bands."""
    x = np.moveaxis(np.asarray(x), axis, -1)
    if x.shape[-1] < 2:
        return np.moveaxis(x.copy(), -1, axis), np.moveaxis(x[..., :0].copy(), -1, axis)
    even, odd = x[..., 0::2], x[..., 1::2]
    ne, no = even.shape[-1], odd.shape[-1]
    pred = even[..., :no] + _neighbours(even, no)
    d = odd - (pred >> 1) if integer else odd - pred / 2.0
    dl, dr = _d_pair(d, ne)
    s = even + ((dl + dr + 2) >> 2) if integer else even + (dl + dr) / 4.0
    return np.moveaxis(s, -1, axis), np.moveaxis(d, -1, axis)


def inverse_1d(s, d, axis=-1, integer=True):
    s = np.moveaxis(np.asarray(s), axis, -1)
    d = np.moveaxis(np.asarray(d), axis, -1)
    ne, no = s.shape[-1], d.shape[-1]
    if no == 0:
        return np.moveaxis(s.copy(), -1, axis)
    dl, dr = _d_pair(d, ne)
    even = s - ((dl + dr + 2) >> 2) if integer else s - (dl + dr) / 4.0
    pred = even[..., :no] + _neighbours(even, no)
    odd = d + (pred >> 1) if integer else d + pred / 2.0
    out = np.empty(s.shape[:-1] + (ne + no,), dtype=np.result_type(even, odd))
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return np.moveaxis(out, -1, axis)


def forward_2d(img, levels, integer=True):
    """Multi-level decomposition of the last two axes.

    Returns ``[LL, (HL, LH, HH) coarsest, ..., (HL, LH, HH) finest]``.
    """
    ll = np.asarray(img, dtype=np.int64 if integer else float)
    details = []
    for _ in range(levels):
        lo, hi = forward_1d(ll, axis=-1, integer=integer)
        ll2, lh = forward_1d(lo, axis=-2, integer=integer)
        hl, hh = forward_1d(hi, axis=-2, integer=integer)
        details.append((hl, lh, hh))
        ll = ll2
    return [ll] + details[::-1]


def inverse_2d(bands, integer=True):
    ll = bands[0]
    for hl, lh, hh in bands[1:]:
        lo = inverse_1d(ll, lh, axis=-2, integer=integer)
        hi = inverse_1d(hl, hh, axis=-2, integer=integer)
        ll = inverse_1d(lo, hi, axis=-1, integer=integer)
    return ll


def max_levels(height, width, cap=5):
    n = 0
    while n < cap and min(height, width) >> (n + 1) >= 1:
        n += 1
    return n


@lru_cache(maxsize=None)
def band_gains(height, width, levels):
    """Squared L2 norm of the synthesis basis of each band, in band order
    ``[LL, HL, LH, HH (coarsest), ..., HL, LH, HH (finest)]``; measured by
    synthesising a unit impulse placed mid-band."""
    zero = forward_2d(np.zeros((height, width)), levels, integer=False)
    gains = []

    def probe(path):
        bands = [b.copy() if not isinstance(b, tuple) else tuple(x.copy() for x in b) for b in zero]
        if path[1] is None:
            arr = bands[0]
        else:
            arr = bands[path[0]][path[1]]
        if arr.size == 0:
            return 1.0
        arr[arr.shape[0] // 2, arr.shape[1] // 2] = 1.0
        return float(np.sum(inverse_2d(bands, integer=False) ** 2))

    gains.append(probe((0, None)))
    for lvl in range(1, levels + 1):
        for k in range(3):
            gains.append(probe((lvl, k)))
    return tuple(gains)
