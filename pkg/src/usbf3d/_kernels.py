"""Compiled per-voxel kernels.

Each kernel processes a contiguous range of (x, y) columns and writes only to
those columns, so chunks can run on separate threads (the kernels release the
GIL) and the result does not depend on how columns are split. Within a column
the loop runs element-outer, depth-inner so each channel row is read
sequentially; every voxel still accumulates its channels in element order.
"""

import math

import numba
import numpy as np

FLAG_COHERENCE = 1  # raw sum, incoherent energy, valid count
FLAG_VAR_N = 2  # variance of s over valid channels
FLAG_VAR = 4  # variance of s / a over valid channels


# beyond this argument sinc(x) < 0.5, below any sensitivity cutoff >= 0.5
SINC_REJECT = 0.6035


# Taylor coefficients of sin(t)/t and cos(t) in powers of t^2
# (12 terms reach ~1e-16 for t <= 3.7, enough for both uses below)
_SINC_C = np.array([(-1.0) ** k / math.factorial(2 * k + 1) for k in range(12)])
_COS_C = np.array([(-1.0) ** k / math.factorial(2 * k) for k in range(12)])


@numba.njit(cache=True, nogil=True, inline="always")
def _series(c, t):
    acc = c[11]
    for k in range(10, -1, -1):
        acc = acc * t + c[k]
    return acc


@numba.njit(cache=True, nogil=True, inline="always")
def _sinc_main(x):
    # sin(pi x)/(pi x), accurate to ~1e-16 for |x| <= 0.61
    return _series(_SINC_C, (math.pi * x) ** 2)


@numba.njit(cache=True, nogil=True, inline="always")
def _sensitivity(dx, dy, z, inv_r, kw, kh):
    """Element directivity, or -1 when it is certainly below 0.5."""
    ax = kw * dx * inv_r
    ay = kh * dy * inv_r
    if abs(ax) > SINC_REJECT or abs(ay) > SINC_REJECT:
        return -1.0
    a = _sinc_main(ax) * _sinc_main(ay) * (z * inv_r)
    if a > 1.0:
        a = 1.0
    return a


@numba.njit(cache=True, nogil=True, inline="always")
def _cis_small(th):
    # exp(j th) for |th| <= pi/2, error ~1e-16
    t = th * th
    return complex(_series(_COS_C, t), th * _series(_SINC_C, t))


@numba.njit(cache=True, nogil=True, inline="always")
def _taps(u, n_t, rot, dphi):
    """Sample index and the two complex taps for fractional index ``u``.

    ``c0 * x[k] + c1 * x[k + 1]`` equals linear interpolation of the baseband
    signal followed by remodulation, so the carrier phase between samples is
    restored exactly.
    """
    k = int(u)
    if k > n_t - 2:
        k = n_t - 2
    w = u - k
    c = _cis_small(dphi * w)
    return k, c * (1.0 - w), c * (w * rot)


@numba.njit(cache=True, nogil=True, inline="always")
def _root(v, p):
    # sign(v) |v|^(1/p); p == 4 takes the double square root
    if p == 1.0:
        return v
    if v > 0.0:
        return math.sqrt(math.sqrt(v)) if p == 4.0 else v ** (1.0 / p)
    if v < 0.0:
        return -(math.sqrt(math.sqrt(-v)) if p == 4.0 else (-v) ** (1.0 / p))
    return 0.0


@numba.njit(cache=True, nogil=True)
def coherence_columns(
    rf, t0, fs, rot, dphi, inv_c, t_off, ex, ey, kw, kh, cutoff, xs, ys, zs, q0, q1, flags,
    das_out, raw_out, inc_out, nval_out, var_out, usq_out,
):
    """Apodized sum plus the statistics the coherence weights need.

    ``rf`` holds a batch of frames, shape (n_frames, n_elements, n_samples);
    delays, apodization and interpolation taps are evaluated once per voxel
    and element and applied to every frame. Variances use a one-pass sum
    shifted by the first valid channel value, which keeps cancellation error
    small when channels are nearly equal.
    """
    n_f, n_el, n_t = rf.shape
    nx = xs.shape[0]
    nz = zs.shape[0]
    want_var = np.array([(flags & FLAG_VAR_N) != 0, (flags & FLAG_VAR) != 0])
    sa = np.empty((n_f, nz), dtype=np.complex128)
    sr = np.empty((n_f, nz), dtype=np.complex128)
    inc = np.empty((n_f, nz))
    nv = np.empty(nz, dtype=np.int64)
    shift = np.empty((2, n_f, nz), dtype=np.complex128)
    su = np.empty((2, n_f, nz), dtype=np.complex128)
    suu = np.empty((2, n_f, nz))
    sabs = np.empty((2, n_f, nz))
    for q in range(q0, q1):
        px = xs[q % nx]
        py = ys[q // nx]
        sa[:] = 0
        sr[:] = 0
        inc[:] = 0
        nv[:] = 0
        su[:] = 0
        suu[:] = 0
        sabs[:] = 0
        for n in range(n_el):
            dx = px - ex[n]
            dy = py - ey[n]
            rho2 = dx * dx + dy * dy
            for kz in range(nz):
                z = zs[kz]
                r = math.sqrt(rho2 + z * z)
                a = _sensitivity(dx, dy, z, 1.0 / r, kw, kh)
                if a < cutoff:
                    continue
                u = ((z + r) * inv_c + t_off - t0) * fs
                if u < 0.0 or u > n_t - 1:
                    continue
                k, c0, c1 = _taps(u, n_t, rot, dphi)
                first = nv[kz] == 0
                for f in range(n_f):
                    s = c0 * rf[f, n, k] + c1 * rf[f, n, k + 1]
                    sa[f, kz] += a * s
                    if flags:
                        sr[f, kz] += s
                        inc[f, kz] += s.real * s.real + s.imag * s.imag
                        for which in range(2):
                            if want_var[which]:
                                val = s if which == 0 else s / a
                                if first:
                                    shift[which, f, kz] = val
                                d = val - shift[which, f, kz]
                                su[which, f, kz] += d
                                suu[which, f, kz] += d.real * d.real + d.imag * d.imag
                                sabs[which, f, kz] += val.real * val.real + val.imag * val.imag
                nv[kz] += 1
        for kz in range(nz):
            if flags:
                nval_out[q, kz] = nv[kz]
            for f in range(n_f):
                das_out[f, q, kz] = sa[f, kz]
                if flags:
                    raw_out[f, q, kz] = sr[f, kz]
                    inc_out[f, q, kz] = inc[f, kz]
                    for which in range(2):
                        if want_var[which] and nv[kz] > 0:
                            m = su[which, f, kz]
                            v = suu[which, f, kz] - (m.real * m.real + m.imag * m.imag) / nv[kz]
                            var_out[which, f, q, kz] = v if v > 0.0 else 0.0
                            usq_out[which, f, q, kz] = sabs[which, f, kz]


@numba.njit(cache=True, nogil=True)
def pdas_columns(rf, t0, fs, rot, dphi, inv_c, t_off, ex, ey, kw, kh, cutoff, xs, ys, zs, q0, q1, p, out):
    """Sum of sign(s)|s|^(1/p) over real delayed RF samples (unapodized).

    ``rf`` is a frame batch as in :func:`coherence_columns`; ``out`` has shape
    (n_frames, n_columns, n_depths).
    """
    n_f, n_el, n_t = rf.shape
    nx = xs.shape[0]
    nz = zs.shape[0]
    acc = np.empty((n_f, nz))
    for q in range(q0, q1):
        px = xs[q % nx]
        py = ys[q // nx]
        acc[:] = 0.0
        for n in range(n_el):
            dx = px - ex[n]
            dy = py - ey[n]
            rho2 = dx * dx + dy * dy
            for kz in range(nz):
                z = zs[kz]
                r = math.sqrt(rho2 + z * z)
                a = _sensitivity(dx, dy, z, 1.0 / r, kw, kh)
                if a < cutoff:
                    continue
                u = ((z + r) * inv_c + t_off - t0) * fs
                if u < 0.0 or u > n_t - 1:
                    continue
                k, c0, c1 = _taps(u, n_t, rot, dphi)
                for f in range(n_f):
                    re = (c0 * rf[f, n, k] + c1 * rf[f, n, k + 1]).real
                    acc[f, kz] += _root(re, p)
        for kz in range(nz):
            for f in range(n_f):
                out[f, q, kz] = acc[f, kz]


@numba.njit(cache=True, nogil=True)
def root_compress_sum(samples, p):
    """sign(s)|s|^(1/p) summed over the last axis of a 2D real array."""
    n_rows, n_ch = samples.shape
    out = np.zeros(n_rows)
    for i in range(n_rows):
        acc = 0.0
        for n in range(n_ch):
            acc += _root(samples[i, n], p)
        out[i] = acc
    return out


@numba.njit(cache=True, nogil=True)
def zncc_volume(vol, tmpl, out):
    """Zero-normalized cross-correlation of ``vol`` with an odd-sized template.

    ``out`` must be zero on entry; voxels where the template does not fit,
    all-zero patches and zero-variance patches are left at 0.
    """
    nx, ny, nz = vol.shape
    tx, ty, tz = tmpl.shape
    hx, hy, hz = tx // 2, ty // 2, tz // 2
    n = tx * ty * tz
    tm = 0.0
    for a in range(tx):
        for b in range(ty):
            for c in range(tz):
                tm += tmpl[a, b, c]
    tm /= n
    tc = np.empty((tx, ty, tz))
    tnorm = 0.0
    for a in range(tx):
        for b in range(ty):
            for c in range(tz):
                d = tmpl[a, b, c] - tm
                tc[a, b, c] = d
                tnorm += d * d
    if tnorm == 0.0:
        return
    tnorm = math.sqrt(tnorm)
    for i in range(hx, nx - hx):
        for j in range(hy, ny - hy):
            for k in range(hz, nz - hz):
                s = 0.0
                mx = 0.0
                for a in range(tx):
                    for b in range(ty):
                        for c in range(tz):
                            v = vol[i - hx + a, j - hy + b, k - hz + c]
                            s += v
                            if abs(v) > mx:
                                mx = abs(v)
                if mx == 0.0:
                    continue
                m = s / n
                num = 0.0
                den = 0.0
                for a in range(tx):
                    for b in range(ty):
                        for c in range(tz):
                            d = vol[i - hx + a, j - hy + b, k - hz + c] - m
                            num += d * tc[a, b, c]
                            den += d * d
                # variance at rounding level counts as zero
                if den <= n * (1e-12 * mx) ** 2:
                    continue
                r = num / (math.sqrt(den) * tnorm)
                out[i, j, k] = min(1.0, max(-1.0, r))
