"""Compiled rollout and reverse sweep for the learnable vector fields.

A model is passed as plain arrays (see ``pack``). The reverse sweep
differentiates the exact sequence of fixed Tsit5 steps taken forward, so
its gradients are those of the discrete loss.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .dynamics import BLOWUP_LIMIT, N_STAGES, TSIT5_A, TSIT5_B
from .models import ModelKind, NodeModel, UdeModel
from .nnet import LEAKY_SLOPE

KIND_NODE = 0
KIND_UDE = 1

_A = np.ascontiguousarray(TSIT5_A[:N_STAGES, :N_STAGES])
_B = np.ascontiguousarray(TSIT5_B)


def pack(model: NodeModel | UdeModel, flat: np.ndarray | None = None):
    """Flatten a model into the argument tuple every kernel takes."""
    params = model.params
    widths = np.asarray(params.arch.layer_widths, dtype=np.int64)
    poffs = np.zeros(len(widths), dtype=np.int64)
    noffs = np.zeros(len(widths), dtype=np.int64)
    for l in range(len(widths) - 1):
        poffs[l + 1] = poffs[l] + widths[l] * widths[l + 1] + widths[l + 1]
        noffs[l + 1] = noffs[l] + widths[l]
    if model.kind is ModelKind.NODE:
        kind = KIND_NODE
        phys = np.zeros(3)
        drift = np.zeros(2)
    else:
        kind = KIND_UDE
        p, d = model.phys, model.demand_drift
        phys = np.array([p.tau, p.alpha, p.I_target])
        drift = np.array([d.rate, d.mean])
    flat = np.ascontiguousarray(params.flat if flat is None else flat, dtype=np.float64)
    return (
        kind,
        flat,
        widths,
        poffs,
        noffs,
        params.arch.activation.code,
        np.ascontiguousarray(model.norm.center),
        np.ascontiguousarray(model.norm.scale),
        phys,
        drift,
    )


@njit(cache=True)
def _mlp_fwd(flat, widths, poffs, noffs, act, pre, post):
    # post[0:widths[0]] holds the input on entry
    L = widths.shape[0] - 1
    for l in range(L):
        fi = widths[l]
        fo = widths[l + 1]
        w0 = poffs[l]
        b0 = w0 + fo * fi
        ni = noffs[l]
        no = noffs[l + 1]
        for o in range(fo):
            s = flat[b0 + o]
            r = w0 + o * fi
            for i in range(fi):
                s += flat[r + i] * post[ni + i]
            pre[no + o] = s
            if l == L - 1 or act == 2:
                post[no + o] = s
            elif act == 0:
                post[no + o] = s if s > 0.0 else LEAKY_SLOPE * s
            else:
                post[no + o] = np.tanh(s)


@njit(cache=True)
def _mlp_bwd(flat, widths, poffs, noffs, act, pre, post, gout, gflat, gin):
    L = widths.shape[0] - 1
    maxw = 0
    for w in widths:
        if w > maxw:
            maxw = w
    delta = np.empty(maxw)
    nxt = np.empty(maxw)
    for o in range(widths[L]):
        delta[o] = gout[o]
    for l in range(L - 1, -1, -1):
        fi = widths[l]
        fo = widths[l + 1]
        w0 = poffs[l]
        b0 = w0 + fo * fi
        ni = noffs[l]
        for i in range(fi):
            nxt[i] = 0.0
        for o in range(fo):
            d = delta[o]
            if d == 0.0:
                continue
            gflat[b0 + o] += d
            r = w0 + o * fi
            for i in range(fi):
                gflat[r + i] += d * post[ni + i]
                nxt[i] += flat[r + i] * d
        if l > 0:
            for i in range(fi):
                if act == 0:
                    delta[i] = nxt[i] if pre[ni + i] > 0.0 else LEAKY_SLOPE * nxt[i]
                elif act == 1:
                    a = post[ni + i]
                    delta[i] = nxt[i] * (1.0 - a * a)
                else:
                    delta[i] = nxt[i]
        else:
            for i in range(fi):
                gin[i] = nxt[i]


@njit(cache=True)
def _rhs(kind, flat, widths, poffs, noffs, act, center, scale, phys, drift, x, pre, post, f):
    for j in range(3):
        post[j] = (x[j] - center[j]) / scale[j]
    _mlp_fwd(flat, widths, poffs, noffs, act, pre, post)
    out = noffs[widths.shape[0] - 1]
    if kind == 0:
        for j in range(3):
            f[j] = post[out + j]
    else:
        tau, alpha, itgt = phys[0], phys[1], phys[2]
        f[0] = x[1] - x[2]
        f[1] = (x[2] + alpha * (itgt - x[0]) - x[1]) / tau + post[out]
        f[2] = drift[0] * (drift[1] - x[2])


@njit(cache=True)
def _rhs_vjp(kind, flat, widths, poffs, noffs, act, scale, phys, drift, pre, post, u, gflat, gx):
    gz = np.zeros(3)
    if kind == 0:
        _mlp_bwd(flat, widths, poffs, noffs, act, pre, post, u, gflat, gz)
        for j in range(3):
            gx[j] = gz[j] / scale[j]
    else:
        tau, alpha = phys[0], phys[1]
        g1 = np.empty(1)
        g1[0] = u[1]
        _mlp_bwd(flat, widths, poffs, noffs, act, pre, post, g1, gflat, gz)
        gx[0] = gz[0] / scale[0] - alpha / tau * u[1]
        gx[1] = gz[1] / scale[1] + u[0] - u[1] / tau
        gx[2] = gz[2] / scale[2] - u[0] + u[1] / tau - drift[0] * u[2]


@njit(cache=True)
def rollout_kernel(kind, flat, widths, poffs, noffs, act, center, scale, phys, drift, x0, n_steps, dt, A, B):
    """Returns ``(traj, stage_pre, stage_post, n_done)``; ``n_done < n_steps`` means blow-up."""
    S = B.shape[0]
    L = widths.shape[0] - 1
    total = noffs[L] + widths[L]
    traj = np.zeros((n_steps + 1, 3))
    pres = np.zeros((n_steps, S, total))
    posts = np.zeros((n_steps, S, total))
    k = np.zeros((S, 3))
    y = np.zeros(3)
    for j in range(3):
        traj[0, j] = x0[j]
    for n in range(n_steps):
        for i in range(S):
            for j in range(3):
                acc = 0.0
                for m in range(i):
                    acc += A[i, m] * k[m, j]
                y[j] = traj[n, j] + dt * acc
            _rhs(kind, flat, widths, poffs, noffs, act, center, scale, phys, drift, y, pres[n, i], posts[n, i], k[i])
            for j in range(3):
                if not np.isfinite(k[i, j]):
                    return traj, pres, posts, n
        for j in range(3):
            acc = 0.0
            for i in range(S):
                acc += B[i] * k[i, j]
            v = traj[n, j] + dt * acc
            if not np.isfinite(v) or abs(v) > BLOWUP_LIMIT:
                return traj, pres, posts, n
            traj[n + 1, j] = v
    return traj, pres, posts, n_steps


@njit(cache=True)
def backward_kernel(kind, flat, widths, poffs, noffs, act, center, scale, phys, drift, pres, posts, gtraj, dt, A, B):
    """Gradient w.r.t. ``flat`` of a loss whose gradient w.r.t. each trajectory point is ``gtraj``.

    Stage states are not needed: the stored network activations (with the
    input normalization inverted through ``scale``) carry everything the
    vector-Jacobian products use, and the structural terms are linear.
    """
    n_steps = pres.shape[0]
    S = B.shape[0]
    gflat = np.zeros(flat.shape[0])
    lam = np.zeros(3)
    lam_new = np.zeros(3)
    dk = np.zeros((S, 3))
    gx = np.zeros(3)
    for j in range(3):
        lam[j] = gtraj[n_steps, j]
    for n in range(n_steps - 1, -1, -1):
        for i in range(S):
            for j in range(3):
                dk[i, j] = dt * B[i] * lam[j]
        for j in range(3):
            lam_new[j] = lam[j]
        for i in range(S - 1, -1, -1):
            _rhs_vjp(kind, flat, widths, poffs, noffs, act, scale, phys, drift, pres[n, i], posts[n, i], dk[i], gflat, gx)
            for j in range(3):
                lam_new[j] += gx[j]
            for m in range(i):
                for j in range(3):
                    dk[m, j] += dt * A[i, m] * gx[j]
        for j in range(3):
            lam[j] = lam_new[j] + gtraj[n, j]
    return gflat


def rollout_packed(packed, x0, n_steps: int, dt: float):
    return rollout_kernel(*packed, np.asarray(x0, dtype=np.float64), int(n_steps), float(dt), _A, _B)


def backward_packed(packed, pres, posts, gtraj, dt: float):
    return backward_kernel(*packed, pres, posts, np.ascontiguousarray(gtraj), float(dt), _A, _B)
