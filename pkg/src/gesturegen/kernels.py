"""Hot inner loops, each in two flavours.

Every kernel exists as a numba ``@njit`` loop and as a vectorised numpy
function with the same signature. The public name is bound to one of them
at import time:

    GESTUREGEN_NUMBA=0   force the numpy path
    GESTUREGEN_NUMBA=1   use numba when it imports (default)

Both flavours stay importable as ``<name>_numba`` / ``<name>_numpy`` so tests
and ``benchmarks/bench_kernels.py`` can compare them directly.
"""

import math
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("GESTUREGEN_NUMBA", "1").strip() not in ("0", "false", "no")


def _njit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend():
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# forward kinematics: chain local rotations/translations down the hierarchy
# --------------------------------------------------------------------------

def fk_chain_numpy(parents, local_rot, local_trans):
    """Global joint positions from per-frame local transforms.

    parents: (J,) int, -1 for the root, parent index < child index.
    local_rot: (F, J, 3, 3); local_trans: (F, J, 3) (offset + translation channels).
    Returns (F, J, 3).
    """
    n_frames, n_joints = local_trans.shape[:2]
    glob_rot = np.empty_like(local_rot)
    pos = np.empty_like(local_trans)
    for j in range(n_joints):
        p = parents[j]
        if p < 0:
            glob_rot[:, j] = local_rot[:, j]
            pos[:, j] = local_trans[:, j]
        else:
            glob_rot[:, j] = np.matmul(glob_rot[:, p], local_rot[:, j])
            pos[:, j] = pos[:, p] + np.einsum("fab,fb->fa", glob_rot[:, p], local_trans[:, j])
    return pos


def _fk_chain_loop(parents, local_rot, local_trans):
    n_frames, n_joints = local_trans.shape[0], local_trans.shape[1]
    glob_rot = np.empty_like(local_rot)
    pos = np.empty_like(local_trans)
    for f in range(n_frames):
        for j in range(n_joints):
            p = parents[j]
            if p < 0:
                for a in range(3):
                    pos[f, j, a] = local_trans[f, j, a]
                    for b in range(3):
                        glob_rot[f, j, a, b] = local_rot[f, j, a, b]
            else:
                for a in range(3):
                    acc = pos[f, p, a]
                    for b in range(3):
                        acc += glob_rot[f, p, a, b] * local_trans[f, j, b]
                        s = 0.0
                        for k in range(3):
                            s += glob_rot[f, p, a, k] * local_rot[f, j, k, b]
                        glob_rot[f, j, a, b] = s
                    pos[f, j, a] = acc
    return pos


fk_chain_numba = _njit(_fk_chain_loop)


# --------------------------------------------------------------------------
# One-Euro filter, column-wise over a (T, D) matrix
# --------------------------------------------------------------------------

def _alpha(rate, cutoff):
    tau = 1.0 / (2.0 * math.pi * cutoff)
    return 1.0 / (1.0 + tau * rate)


def one_euro_numpy(x, rate, min_cutoff, beta, d_cutoff):
    n = x.shape[0]
    out = np.empty_like(x, dtype=np.float64)
    if n == 0:
        return out
    a_d = _alpha(rate, d_cutoff)
    prev = x[0].astype(np.float64)
    dx_hat = np.zeros(x.shape[1])
    out[0] = prev
    for t in range(1, n):
        dx = (x[t] - prev) * rate
        dx_hat = a_d * dx + (1.0 - a_d) * dx_hat
        cutoff = min_cutoff + beta * np.abs(dx_hat)
        tau = 1.0 / (2.0 * np.pi * cutoff)
        a = 1.0 / (1.0 + tau * rate)
        prev = a * x[t] + (1.0 - a) * prev
        out[t] = prev
    return out


def _one_euro_loop(x, rate, min_cutoff, beta, d_cutoff):
    n, d = x.shape[0], x.shape[1]
    out = np.empty((n, d))
    if n == 0:
        return out
    tau_d = 1.0 / (2.0 * math.pi * d_cutoff)
    a_d = 1.0 / (1.0 + tau_d * rate)
    for c in range(d):
        prev = x[0, c]
        dx_hat = 0.0
        out[0, c] = prev
        for t in range(1, n):
            dx = (x[t, c] - prev) * rate
            dx_hat = a_d * dx + (1.0 - a_d) * dx_hat
            cutoff = min_cutoff + beta * abs(dx_hat)
            tau = 1.0 / (2.0 * math.pi * cutoff)
            a = 1.0 / (1.0 + tau * rate)
            prev = a * x[t, c] + (1.0 - a) * prev
            out[t, c] = prev
    return out


one_euro_numba = _njit(_one_euro_loop)


# --------------------------------------------------------------------------
# centred moving average with a window that shrinks at the edges
# --------------------------------------------------------------------------

def moving_average_numpy(x, half):
    n = x.shape[0]
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    counts = (hi - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return (csum[hi] - csum[lo]) / counts


def _moving_average_loop(x, half):
    n, d = x.shape[0], x.shape[1]
    out = np.empty((n, d))
    for t in range(n):
        lo = max(t - half, 0)
        hi = min(t + half + 1, n)
        for c in range(d):
            s = 0.0
            for k in range(lo, hi):
                s += x[k, c]
            out[t, c] = s / (hi - lo)
    return out


moving_average_numba = _njit(_moving_average_loop)


# --------------------------------------------------------------------------
# equal-width histogram counts, out-of-range values clipped to edge bins
# --------------------------------------------------------------------------

def histogram_counts_numpy(values, lo, hi, n_bins):
    width = (hi - lo) / n_bins
    idx = np.floor((values - lo) / width)
    idx = np.clip(idx, 0, n_bins - 1).astype(np.int64)
    return np.bincount(idx, minlength=n_bins).astype(np.float64)


def _histogram_counts_loop(values, lo, hi, n_bins):
    counts = np.zeros(n_bins)
    width = (hi - lo) / n_bins
    for i in range(values.shape[0]):
        k = math.floor((values[i] - lo) / width)
        if k < 0:
            k = 0
        elif k > n_bins - 1:
            k = n_bins - 1
        counts[int(k)] += 1.0
    return counts


histogram_counts_numba = _njit(_histogram_counts_loop)


# --------------------------------------------------------------------------
# pitch: pick the period from a normalised cross-correlation matrix
# --------------------------------------------------------------------------

def pick_period_numpy(nccf, min_lag, threshold, octave_ratio):
    """Return (lag, peak) per frame; lag is fractional, 0 where unvoiced.

    nccf: (F, L) values for lags min_lag .. min_lag + L - 1. The chosen lag is
    the smallest local maximum reaching ``octave_ratio`` of the frame's best
    peak, refined by a parabola through its neighbours.
    """
    n_frames, n_lags = nccf.shape
    inner = nccf[:, 1:-1]
    is_peak = (inner >= nccf[:, :-2]) & (inner > nccf[:, 2:])
    peak_vals = np.where(is_peak, inner, -np.inf)
    best = peak_vals.max(axis=1)
    ok = is_peak & (inner >= octave_ratio * best[:, None]) & (inner >= threshold)
    has = ok.any(axis=1)
    first = np.argmax(ok, axis=1) + 1
    rows = np.arange(n_frames)
    lag = np.zeros(n_frames)
    peak = np.where(np.isfinite(best), best, 0.0)
    if has.any():
        r = rows[has]
        k = first[has]
        ym, y0, yp = nccf[r, k - 1], nccf[r, k], nccf[r, k + 1]
        denom = ym - 2.0 * y0 + yp
        shift = np.where(denom < 0.0, 0.5 * (ym - yp) / np.where(denom < 0.0, denom, 1.0), 0.0)
        lag[r] = min_lag + k + np.clip(shift, -0.5, 0.5)
        peak[r] = y0
    return lag, peak


def _pick_period_loop(nccf, min_lag, threshold, octave_ratio):
    n_frames, n_lags = nccf.shape[0], nccf.shape[1]
    lag = np.zeros(n_frames)
    peak = np.zeros(n_frames)
    for f in range(n_frames):
        best = -np.inf
        for k in range(1, n_lags - 1):
            v = nccf[f, k]
            if v >= nccf[f, k - 1] and v > nccf[f, k + 1] and v > best:
                best = v
        if best == -np.inf:
            continue
        peak[f] = best
        for k in range(1, n_lags - 1):
            v = nccf[f, k]
            if v >= nccf[f, k - 1] and v > nccf[f, k + 1] and v >= octave_ratio * best and v >= threshold:
                ym = nccf[f, k - 1]
                yp = nccf[f, k + 1]
                denom = ym - 2.0 * v + yp
                shift = 0.0
                if denom < 0.0:
                    shift = 0.5 * (ym - yp) / denom
                    if shift > 0.5:
                        shift = 0.5
                    elif shift < -0.5:
                        shift = -0.5
                lag[f] = min_lag + k + shift
                peak[f] = v
                break
    return lag, peak


pick_period_numba = _njit(_pick_period_loop)


if USE_NUMBA:
    fk_chain = fk_chain_numba
    one_euro = one_euro_numba
    moving_average = moving_average_numba
    histogram_counts = histogram_counts_numba
    pick_period = pick_period_numba
else:
    fk_chain = fk_chain_numpy
    one_euro = one_euro_numpy
    moving_average = moving_average_numpy
    histogram_counts = histogram_counts_numpy
    pick_period = pick_period_numpy
