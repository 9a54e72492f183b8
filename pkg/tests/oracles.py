"""Independent reference implementations used as test oracles.

Written with explicit loops and no filtering or shared helpers so that they do not inherit
mistakes from the vectorised code under test.
"""

import itertools
import math

import numpy as np


def mse_loop(a, b, data_range=1.0):
    total, n = 0.0, 0
    for idx in np.ndindex(a.shape):
        d = (float(a[idx]) - float(b[idx])) / data_range
        total += d * d
        n += 1
    return total / n


def psnr_loop(a, b, data_range=1.0):
    m = mse_loop(a, b, data_range)
    return math.inf if m == 0 else 10.0 * math.log10(1.0 / m)


def _ssim_stats(x, y, c1, c2):
    # two-pass moments over one window
    mx = x.mean()
    my = y.mean()
    dx = x - mx
    dy = y - my
    vx = (dx * dx).mean()
    vy = (dy * dy).mean()
    cxy = (dx * dy).mean()
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim_global_loop(a, b, data_range=1.0, k1=0.01, k2=0.03):
    return _ssim_stats(a / data_range, b / data_range, (k1) ** 2, (k2) ** 2)


def ssim_windowed_loop(a, b, window=7, data_range=1.0, k1=0.01, k2=0.03):
    a = a / data_range
    b = b / data_range
    c1, c2 = k1 ** 2, k2 ** 2
    starts = [range(s - window + 1) for s in a.shape]
    vals = []
    for origin in itertools.product(*starts):
        sl = tuple(slice(o, o + window) for o in origin)
        vals.append(_ssim_stats(a[sl], b[sl], c1, c2))
    return sum(vals) / len(vals)
