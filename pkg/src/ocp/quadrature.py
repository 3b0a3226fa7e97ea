"""Quadrature rules used along paths and for deterministic integrals."""

import math

import numpy as np

from .errors import QuadratureError


def adaptive_simpson(f, a, b, rel_tol=1e-8, abs_tol=1e-15, max_depth=48):
    """Integrate ``f`` over ``[a, b]`` with recursive adaptive Simpson.

    Each accepted panel is Richardson-corrected. Raises ``QuadratureError``
    when a panel still fails the local tolerance at ``max_depth``.
    """
    if a == b:
        return 0.0
    sign = 1.0
    if b < a:
        a, b, sign = b, a, -1.0
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) * (fa + 4.0 * fm + fb) / 6.0
    # crude magnitude estimate so the relative target is meaningful
    scale = abs(whole) + (b - a) * (abs(fa) + abs(fm) + abs(fb)) / 3.0
    tol = max(rel_tol * scale, abs_tol)

    failures = []
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    parts = []
    while stack:
        lo, hi, flo, fmid, fhi, s, eps, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = (mid - lo) * (flo + 4.0 * flm + fmid) / 6.0
        right = (hi - mid) * (fmid + 4.0 * frm + fhi) / 6.0
        delta = left + right - s
        if abs(delta) <= 15.0 * eps or depth >= max_depth:
            if abs(delta) > 15.0 * eps:
                failures.append((lo, hi, abs(delta)))
            parts.append(left + right + delta / 15.0)
            continue
        stack.append((mid, hi, fmid, frm, fhi, right, 0.5 * eps, depth + 1))
        stack.append((lo, mid, flo, flm, fmid, left, 0.5 * eps, depth + 1))
    if failures:
        worst = max(failures, key=lambda p: p[2])
        raise QuadratureError(
            f"adaptive Simpson did not converge on [{a}, {b}]: {len(failures)} panels "
            f"at max depth {max_depth}, worst panel [{worst[0]}, {worst[1]}] "
            f"error estimate {worst[2]:.3e} (tolerance {tol:.3e})"
        )
    return sign * math.fsum(parts)


def cumulative_trapezoid(times, right, left=None):
    """Running trapezoid integral on a merged grid.

    ``right[i]`` is the integrand value at ``times[i]`` and ``left[i]`` its
    left limit there (defaults to ``right``). Panel ``[t_i, t_{i+1}]`` uses
    ``right[i]`` and ``left[i+1]``, so jump discontinuities at nodes are
    integrated piecewise. Returns an array with ``out[0] == 0``.
    """
    times = np.asarray(times, dtype=float)
    right = np.asarray(right, dtype=float)
    left = right if left is None else np.asarray(left, dtype=float)
    out = np.empty_like(times)
    out[0] = 0.0
    np.cumsum(0.5 * np.diff(times) * (right[:-1] + left[1:]), out=out[1:])
    return out
