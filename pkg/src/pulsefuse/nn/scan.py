"""Fused selective scan with a checkpointed backward pass.

Recurrence, per batch row and channel d (state size N):

    h_t = exp(delta_t[d] * A[d]) * h_{t-1} + delta_t[d] * u_t[d] * B_t
    y_t[d] = <h_t, C_t> + D[d] * u_t[d]

Only every ``CHECKPOINT``-th state is kept during the forward pass; the
backward pass recomputes one segment of states at a time from those.
"""

from __future__ import annotations

import numba
import numpy as np

from .tensor import Tensor, _make, as_tensor
from ..errors import ShapeMismatch

CHECKPOINT = 64


@numba.njit(cache=True)
def _scan_fwd(u, delta, A, Bm, Cm, every):
    bsz, L, D = u.shape
    N = A.shape[1]
    nchk = (L + every - 1) // every
    y = np.zeros((bsz, L, D))
    chk = np.zeros((bsz, nchk, D, N))
    for b in range(bsz):
        h = np.zeros((D, N))
        for t in range(L):
            if t % every == 0:
                chk[b, t // every] = h
            for d in range(D):
                dt = delta[b, t, d]
                du = dt * u[b, t, d]
                acc = 0.0
                for n in range(N):
                    hv = np.exp(dt * A[d, n]) * h[d, n] + du * Bm[b, t, n]
                    h[d, n] = hv
                    acc += hv * Cm[b, t, n]
                y[b, t, d] = acc
    return y, chk


@numba.njit(cache=True)
def _scan_bwd(u, delta, A, Bm, Cm, chk, gy, every):
    bsz, L, D = u.shape
    N = A.shape[1]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(Bm)
    gC = np.zeros_like(Cm)
    buf = np.zeros((every + 1, D, N))
    abuf = np.zeros((every, D, N))
    for b in range(bsz):
        gh = np.zeros((D, N))
        nchk = chk.shape[1]
        for c in range(nchk - 1, -1, -1):
            t0 = c * every
            t1 = min(t0 + every, L)
            buf[0] = chk[b, c]
            for t in range(t0, t1):
                i = t - t0
                for d in range(D):
                    dt = delta[b, t, d]
                    du = dt * u[b, t, d]
                    for n in range(N):
                        a = np.exp(dt * A[d, n])
                        abuf[i, d, n] = a
                        buf[i + 1, d, n] = a * buf[i, d, n] + du * Bm[b, t, n]
            for t in range(t1 - 1, t0 - 1, -1):
                i = t - t0
                for d in range(D):
                    dt = delta[b, t, d]
                    ut = u[b, t, d]
                    g_out = gy[b, t, d]
                    acc_du = 0.0
                    acc_dt = 0.0
                    for n in range(N):
                        hcur = buf[i + 1, d, n]
                        hprev = buf[i, d, n]
                        gC[b, t, n] += g_out * hcur
                        g = gh[d, n] + g_out * Cm[b, t, n]
                        abar = abuf[i, d, n]
                        g_abar = g * hprev * abar
                        acc_dt += g_abar * A[d, n] + g * ut * Bm[b, t, n]
                        gA[d, n] += g_abar * dt
                        acc_du += g * Bm[b, t, n]
                        gB[b, t, n] += g * dt * ut
                        gh[d, n] = g * abar
                    gdelta[b, t, d] += acc_dt
                    gu[b, t, d] += acc_du * dt
    return gu, gdelta, gA, gB, gC


def scan_reference(u, delta, A, Bm, Cm, D=None) -> np.ndarray:
    """Plain-loop oracle for the scan (slow; used by tests)."""
    bsz, L, dim = u.shape
    y = np.zeros((bsz, L, dim))
    for b in range(bsz):
        h = np.zeros(A.shape)
        for t in range(L):
            h = np.exp(delta[b, t][:, None] * A) * h + (delta[b, t] * u[b, t])[:, None] * Bm[b, t][None, :]
            y[b, t] = h @ Cm[b, t]
            if D is not None:
                y[b, t] += D * u[b, t]
    return y


def selective_scan(u, delta, A, Bm, Cm, D=None, every: int = CHECKPOINT) -> Tensor:
    """Differentiable scan.  u, delta: (B, L, D); A: (D, N); Bm, Cm: (B, L, N); D: (D,)."""
    u, delta, A, Bm, Cm = (as_tensor(v) for v in (u, delta, A, Bm, Cm))
    if u.ndim != 3 or delta.shape != u.shape:
        raise ShapeMismatch(f"scan: u {u.shape}, delta {delta.shape}")
    bsz, L, dim = u.shape
    if A.shape[0] != dim or Bm.shape != (bsz, L, A.shape[1]) or Cm.shape != Bm.shape:
        raise ShapeMismatch(f"scan: A {A.shape}, B {Bm.shape}, C {Cm.shape}")
    args = [np.ascontiguousarray(v.data) for v in (u, delta, A, Bm, Cm)]
    y, chk = _scan_fwd(*args, every)
    parents = [u, delta, A, Bm, Cm]
    if D is not None:
        D = as_tensor(D)
        y = y + D.data * args[0]
        parents.append(D)

    def back(g):
        g = np.ascontiguousarray(g)
        gu, gdelta, gA, gB, gC = _scan_bwd(*args, chk, g, every)
        grads = [gu, gdelta, gA, gB, gC]
        if D is not None:
            grads[0] = gu + g * D.data
            grads.append((g * args[0]).sum(axis=(0, 1)))
        return tuple(grads)

    return _make(y, tuple(parents), back, "selective_scan")
