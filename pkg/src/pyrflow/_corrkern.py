"""Compiled inner loops for the correlation cost volume.

Serial and parallel variants of the same arithmetic; the parallel ones
split work across rows of independent output slices, so results are
bit-identical regardless of thread count.  All kernels compute raw dot-product
sums; normalization by channel count lives in the python wrapper.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True)
def corr_fwd_serial(f1, f2, n):
    B, C, H, W = f1.shape
    D = 2 * n + 1
    out = np.zeros((B, D * D, H, W), dtype=f1.dtype)
    for b in range(B):
        for o in range(D * D):
            oy = o // D - n
            ox = o % D - n
            y_lo = max(0, -oy)
            y_hi = min(H, H - oy)
            x_lo = max(0, -ox)
            x_hi = min(W, W - ox)
            for c in range(C):
                for y in range(y_lo, y_hi):
                    for x in range(x_lo, x_hi):
                        out[b, o, y, x] += f1[b, c, y, x] * f2[b, c, y + oy, x + ox]
    return out


@njit(cache=True, parallel=True)
def corr_fwd_parallel(f1, f2, n):
    B, C, H, W = f1.shape
    D = 2 * n + 1
    out = np.zeros((B, D * D, H, W), dtype=f1.dtype)
    for p in prange(B * D * D):
        b = p // (D * D)
        o = p % (D * D)
        oy = o // D - n
        ox = o % D - n
        y_lo = max(0, -oy)
        y_hi = min(H, H - oy)
        x_lo = max(0, -ox)
        x_hi = min(W, W - ox)
        for c in range(C):
            for y in range(y_lo, y_hi):
                for x in range(x_lo, x_hi):
                    out[b, o, y, x] += f1[b, c, y, x] * f2[b, c, y + oy, x + ox]
    return out


@njit(cache=True)
def corr_bwd_serial(f1, f2, g, n):
    B, C, H, W = f1.shape
    D = 2 * n + 1
    gf1 = np.zeros_like(f1)
    gf2 = np.zeros_like(f2)
    for b in range(B):
        for c in range(C):
            for o in range(D * D):
                oy = o // D - n
                ox = o % D - n
                y_lo = max(0, -oy)
                y_hi = min(H, H - oy)
                x_lo = max(0, -ox)
                x_hi = min(W, W - ox)
                for y in range(y_lo, y_hi):
                    for x in range(x_lo, x_hi):
                        gv = g[b, o, y, x]
                        gf1[b, c, y, x] += gv * f2[b, c, y + oy, x + ox]
                        gf2[b, c, y + oy, x + ox] += gv * f1[b, c, y, x]
    return gf1, gf2


@njit(cache=True, parallel=True)
def corr_bwd_parallel(f1, f2, g, n):
    B, C, H, W = f1.shape
    D = 2 * n + 1
    gf1 = np.zeros_like(f1)
    gf2 = np.zeros_like(f2)
    for p in prange(B * C):
        b = p // C
        c = p % C
        for o in range(D * D):
            oy = o // D - n
            ox = o % D - n
            y_lo = max(0, -oy)
            y_hi = min(H, H - oy)
            x_lo = max(0, -ox)
            x_hi = min(W, W - ox)
            for y in range(y_lo, y_hi):
                for x in range(x_lo, x_hi):
                    gv = g[b, o, y, x]
                    gf1[b, c, y, x] += gv * f2[b, c, y + oy, x + ox]
                    gf2[b, c, y + oy, x + ox] += gv * f1[b, c, y, x]
    return gf1, gf2
