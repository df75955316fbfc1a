"""Hot loops of the samplers.

Each kernel has a loop version compiled with numba and a vectorised numpy
version.  Set ``COMBI_NUMBA=0`` to use the numpy versions everywhere (also
the automatic choice when numba is not importable).  Both versions consume
the same pre-drawn randomness, so they return identical results.

Acceptance tests are written in log space: a proposal with score ``s`` is
accepted from a state with score ``c`` when ``log_u <= s - c``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None

NUMBA_AVAILABLE = nb is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("COMBI_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)

njit_kwargs = {"nogil": True, "cache": False}


def _njit(fn):
    if nb is None:
        return fn
    return nb.njit(**njit_kwargs)(fn)


# Metropolis chains over pre-drawn proposals


def metropolis_scan_np(init_scores, scores, log_u):
    """Run one independent chain per row.

    Returns the column of the proposal each chain ends on (-1 if it never
    left its initial state) and the final score.
    """
    n, steps = scores.shape
    cur = np.array(init_scores, dtype=np.float64, copy=True)
    idx = np.full(n, -1, dtype=np.int64)
    for t in range(steps):
        acc = log_u[:, t] <= scores[:, t] - cur
        cur = np.where(acc, scores[:, t], cur)
        idx = np.where(acc, t, idx)
    return idx, cur


def _metropolis_scan_loop(init_scores, scores, log_u):
    n, steps = scores.shape
    idx = np.full(n, -1, dtype=np.int64)
    cur = np.empty(n, dtype=np.float64)
    for i in range(n):
        c = init_scores[i]
        k = -1
        for t in range(steps):
            if log_u[i, t] <= scores[i, t] - c:
                c = scores[i, t]
                k = t
        idx[i] = k
        cur[i] = c
    return idx, cur


metropolis_scan_nb = _njit(_metropolis_scan_loop)


# coupling from the past


def cftp_resolve_np(scores, log_u, bound):
    """Resolve backward-coupled chains.

    Column ``k`` of each row holds the proposal and uniform used at time
    ``-(k + 1)``.  A time coalesces every chain when ``log_u <= score -
    bound`` since ``bound`` dominates every score.  Returns the column of the
    state reached at time 0 and the coalescence depth ``k + 1``, both -1 for
    rows with no coalescing time yet.
    """
    n, steps = scores.shape
    bound = np.broadcast_to(np.asarray(bound, dtype=np.float64), (n,))
    event = log_u <= scores - bound[:, None]
    has = event.any(axis=1)
    first = np.where(has, np.argmax(event, axis=1), -1)
    rows = np.arange(n)
    state = first.copy()
    cur = np.where(has, scores[rows, np.maximum(first, 0)], 0.0)
    for t in range(steps - 1, -1, -1):
        live = has & (t < first)
        acc = live & (log_u[:, t] <= scores[:, t] - cur)
        cur = np.where(acc, scores[:, t], cur)
        state = np.where(acc, t, state)
    depth = np.where(has, first + 1, -1)
    return state, depth


def _cftp_resolve_loop(scores, log_u, bound):
    n, steps = scores.shape
    state = np.full(n, -1, dtype=np.int64)
    depth = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        b = bound[i]
        first = -1
        for t in range(steps):
            if log_u[i, t] <= scores[i, t] - b:
                first = t
                break
        if first < 0:
            continue
        cur = scores[i, first]
        k = first
        for t in range(first - 1, -1, -1):
            if log_u[i, t] <= scores[i, t] - cur:
                cur = scores[i, t]
                k = t
        state[i] = k
        depth[i] = first + 1
    return state, depth


_cftp_resolve_compiled = _njit(_cftp_resolve_loop)


def cftp_resolve_nb(scores, log_u, bound):
    n = scores.shape[0]
    bound = np.ascontiguousarray(np.broadcast_to(np.asarray(bound, dtype=np.float64), (n,)))
    return _cftp_resolve_compiled(scores, log_u, bound)


# single-bit Metropolis on the hypercube with a linear log-density


def mc_cube_run_np(bits, weights, picks, values, log_u):
    """Advance one chain per row of ``bits`` by ``picks.shape[1]`` steps.

    Step ``t`` proposes setting coordinate ``picks[:, t]`` to ``values[:, t]``
    and accepts with probability ``min(1, exp(w_i (b - u_i)))``.
    """
    bits = np.array(bits, dtype=np.int8, copy=True)
    rows = np.arange(bits.shape[0])
    for t in range(picks.shape[1]):
        i = picks[:, t]
        b = values[:, t]
        delta = weights[i] * (b - bits[rows, i])
        acc = log_u[:, t] <= delta
        bits[rows[acc], i[acc]] = b[acc]
    return bits


def _mc_cube_run_loop(bits, weights, picks, values, log_u):
    out = bits.copy()
    n, steps = picks.shape
    for r in range(n):
        for t in range(steps):
            i = picks[r, t]
            b = values[r, t]
            delta = weights[i] * (b - out[r, i])
            if log_u[r, t] <= delta:
                out[r, i] = b
    return out


mc_cube_run_nb = _njit(_mc_cube_run_loop)


if USE_NUMBA:
    metropolis_scan = metropolis_scan_nb
    cftp_resolve = cftp_resolve_nb
    mc_cube_run = mc_cube_run_nb
else:
    metropolis_scan = metropolis_scan_np
    cftp_resolve = cftp_resolve_np
    mc_cube_run = mc_cube_run_np


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
