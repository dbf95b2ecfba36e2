"""Independent reference computations and the values frozen from them.

Every function here is written from the defining formula in plain Python or
numpy without touching the package, so tests comparing against it are not
circular. ``FROZEN`` holds values these oracles produced once; the tests in
``test_oracles.py`` recompute them so a drift in either side is caught.
"""

import cmath
import math

import numpy as np

C = 1540.0
F0 = 7.8e6
FS = 4 * F0


def round_trip_time(z, element=(0.0, 0.0, 0.0), c=C):
    """Plane-wave transmit down to depth z plus spherical return to ``element``."""
    x, y, zz = 0.0, 0.0, z
    ex, ey, ez = element
    return zz / c + math.sqrt((x - ex) ** 2 + (y - ey) ** 2 + (zz - ez) ** 2) / c


def gaussian_fwhm(sigma):
    return 2.0 * math.sqrt(2.0 * math.log(2.0)) * sigma


def cf(s):
    s = [complex(v) for v in s]
    num = abs(sum(s)) ** 2
    den = len(s) * sum(abs(v) ** 2 for v in s)
    return num / den if den else 0.0


def cv(s, a=None, inverse=True):
    s = [complex(v) for v in s]
    a = [1.0] * len(s) if a is None else list(a)
    u = [v / w for v, w in zip(s, a)] if inverse else s
    m = sum(u) / len(u)
    var = sum(abs(v - m) ** 2 for v in u)
    return abs(sum(s)) ** 2 / var


def root_sum(s, p):
    return sum(math.copysign(abs(v) ** (1.0 / p), v) for v in s)


def sequential_sum(values):
    acc = 0.0
    for v in values:
        acc += float(v)
    return acc


def hard_baffle(width, height, direction, f=F0, c=C):
    ux, uy, uz = direction

    def sinc(x):
        return 1.0 if x == 0 else math.sin(math.pi * x) / (math.pi * x)

    return min(max(sinc(width * ux * f / c) * sinc(height * uy * f / c) * uz, 0.0), 1.0)


def zncc(a, b):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    return float(a @ b / math.sqrt((a @ a) * (b @ b)))


def circular_mean_phase(s):
    return cmath.phase(sum(v / abs(v) for v in s if abs(v) > 0))


FROZEN = {
    # 2 * 0.020 / 1540, s
    "round_trip_20mm": 2.5974025974025976e-05,
    # fs / f0 at 31.2 MHz sampling of a 7.8 MHz pulse
    "samples_per_cycle": 4.0,
    # 2 sqrt(2 ln 2) * 0.2 mm, m
    "gaussian_fwhm_0p2mm": 4.709640090061899e-04,
    # |1 + i|^2 / (2 * 2)
    "cf_1_i": 0.5,
    # |2 + 0|^2 / (|2 - 1|^2 + |0 - 1|^2)
    "cv_2_0": 2.0,
    # 10 mm/s at 500 Hz, m per frame
    "advection_step": 2.0e-05,
    # 16 ** (1/4)
    "root_16_p4": 2.0,
}
