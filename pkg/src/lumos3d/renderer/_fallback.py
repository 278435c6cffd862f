"""Pure numpy rasterizer; same contract and pixel semantics as the compiled kernels.

Splats are visited front to back and each one updates only its bounding box.
Per-splat transmittance and alpha are recorded for the reverse sweep.
"""
from __future__ import annotations

import numpy as np


def _splat_alpha(means2d, conics, opac, i, box, alpha_max):
    x0, x1, y0, y1 = box
    dt = means2d.dtype
    dx = (np.arange(x0, x1, dtype=dt) + dt.type(0.5) - means2d[i, 0])[None, :]
    dy = (np.arange(y0, y1, dtype=dt) + dt.type(0.5) - means2d[i, 1])[:, None]
    a, b, c = conics[i]
    q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
    G = np.exp(dt.type(-0.5) * q)
    raw = opac[i] * G
    return dx, dy, G, raw, np.minimum(raw, dt.type(alpha_max))


def rasterize_forward(means2d, conics, opac, feats, boxes, bg, height, width,
                      alpha_cutoff, alpha_max, t_floor):
    dt = means2d.dtype
    nfeat = feats.shape[1]
    out = np.zeros((height, width, nfeat), dtype=dt)
    T = np.ones((height, width), dtype=dt)
    done = np.zeros((height, width), dtype=bool)
    records = []
    for i in range(len(opac)):
        x0, x1, y0, y1 = boxes[i]
        if x0 >= x1 or y0 >= y1:
            records.append(None)
            continue
        _, _, _, _, alpha = _splat_alpha(means2d, conics, opac, i, boxes[i], alpha_max)
        Tr = T[y0:y1, x0:x1]
        dn = done[y0:y1, x0:x1]
        inc = (alpha >= alpha_cutoff) & ~dn
        test_T = Tr * (1 - alpha)
        stop = inc & (test_T < t_floor)
        dn |= stop
        inc &= ~stop
        w = np.where(inc, alpha * Tr, 0)
        out[y0:y1, x0:x1] += w[..., None] * feats[i]
        records.append((Tr.copy(), inc))
        Tr[...] = np.where(inc, test_T, Tr)
    out += T[..., None] * bg
    return out, (T, records)


def rasterize_backward(means2d, conics, opac, feats, boxes, bg, height, width,
                       alpha_cutoff, alpha_max, t_floor, g_out, saved):
    T_final, records = saved
    n = len(opac)
    f8 = np.float64
    g_out = np.asarray(g_out, dtype=f8)
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_feats = np.zeros((n, feats.shape[1]))
    S = T_final.astype(f8)[..., None] * np.asarray(bg, dtype=f8)
    for i in range(n - 1, -1, -1):
        rec = records[i]
        if rec is None:
            continue
        Ti, inc = rec
        if not inc.any():
            continue
        x0, x1, y0, y1 = boxes[i]
        dx, dy, G, raw, alpha = (np.asarray(v, dtype=f8) for v in
                                 _splat_alpha(means2d, conics, opac, i, boxes[i], alpha_max))
        Ti = Ti.astype(f8)
        fi = feats[i].astype(f8)
        go = g_out[y0:y1, x0:x1]
        Sr = S[y0:y1, x0:x1]
        w = np.where(inc, alpha * Ti, 0.0)
        g_feats[i] = np.einsum("hw,hwk->k", w, go)
        g_alpha = np.where(inc, np.einsum("hwk,hwk->hw", go, Ti[..., None] * fi - Sr / (1 - alpha)[..., None]), 0.0)
        Sr += w[..., None] * fi
        g_alpha = np.where(raw <= alpha_max, g_alpha, 0.0)
        g_opac[i] = np.sum(g_alpha * G)
        g_q = -0.5 * g_alpha * opac[i] * G
        a, b, c = conics[i].astype(f8)
        g_conics[i] = [np.sum(g_q * dx * dx), np.sum(g_q * 2 * dx * dy), np.sum(g_q * dy * dy)]
        g_means[i] = [np.sum(-g_q * (2 * a * dx + 2 * b * dy)), np.sum(-g_q * (2 * b * dx + 2 * c * dy))]
    return g_means, g_conics, g_opac, g_feats
