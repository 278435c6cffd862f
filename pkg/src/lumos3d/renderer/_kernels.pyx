# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel compositing kernels (forward and reverse)."""

import numpy as np
from libc.math cimport exp
from libc.stdlib cimport malloc, free

ctypedef fused real:
    float
    double

cdef enum:
    MAXF = 8


def rasterize_forward(real[:, ::1] means2d, real[:, ::1] conics, real[::1] opac,
                      real[:, ::1] feats, int[::1] tile_ptr, int[::1] tile_ids,
                      real[::1] bg, int height, int width, int tile,
                      double alpha_cutoff, double alpha_max, double t_floor,
                      real[:, :, ::1] out):
    cdef int nfeat = feats.shape[1]
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int tx, ty, px, py, j, g, k
    cdef real T, test_T, alpha, dx, dy, q, w
    cdef real acc[MAXF]
    if nfeat > MAXF:
        raise ValueError("too many feature channels")
    with nogil:
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                for py in range(ty * tile, min((ty + 1) * tile, height)):
                    for px in range(tx * tile, min((tx + 1) * tile, width)):
                        T = 1
                        for k in range(nfeat):
                            acc[k] = 0
                        for j in range(tile_ptr[ty * tiles_x + tx], tile_ptr[ty * tiles_x + tx + 1]):
                            g = tile_ids[j]
                            dx = px + <real>0.5 - means2d[g, 0]
                            dy = py + <real>0.5 - means2d[g, 1]
                            q = conics[g, 0] * dx * dx + 2 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                            alpha = opac[g] * <real>exp(<real>-0.5 * q)
                            if alpha > alpha_max:
                                alpha = <real>alpha_max
                            if alpha < alpha_cutoff:
                                continue
                            test_T = T * (1 - alpha)
                            if test_T < t_floor:
                                break
                            w = alpha * T
                            for k in range(nfeat):
                                acc[k] += feats[g, k] * w
                            T = test_T
                        for k in range(nfeat):
                            out[py, px, k] = acc[k] + T * bg[k]


def rasterize_backward(real[:, ::1] means2d, real[:, ::1] conics, real[::1] opac,
                       real[:, ::1] feats, int[::1] tile_ptr, int[::1] tile_ids,
                       real[::1] bg, int height, int width, int tile,
                       double alpha_cutoff, double alpha_max, double t_floor,
                       double[:, :, ::1] g_out,
                       double[:, ::1] g_means, double[:, ::1] g_conics,
                       double[::1] g_opac, double[:, ::1] g_feats):
    cdef int nfeat = feats.shape[1]
    cdef int tiles_x = (width + tile - 1) // tile
    cdef int tiles_y = (height + tile - 1) // tile
    cdef int ntiles = tiles_x * tiles_y
    cdef int tx, ty, px, py, j, g, k, n, i, t, maxlen = 0
    cdef real T, test_T, alpha, dx, dy, q, raw
    cdef double Ti, a, ga, gq, G, dxd, dyd
    cdef double S[MAXF]
    for t in range(ntiles):
        maxlen = max(maxlen, tile_ptr[t + 1] - tile_ptr[t])
    cdef int *idx = <int *> malloc((maxlen + 1) * sizeof(int))
    cdef double *abuf = <double *> malloc((maxlen + 1) * sizeof(double))
    cdef double *tbuf = <double *> malloc((maxlen + 1) * sizeof(double))
    cdef char *cbuf = <char *> malloc((maxlen + 1) * sizeof(char))
    if idx == NULL or abuf == NULL or tbuf == NULL or cbuf == NULL:
        free(idx); free(abuf); free(tbuf); free(cbuf)
        raise MemoryError()
    try:
        with nogil:
            for ty in range(tiles_y):
                for tx in range(tiles_x):
                    for py in range(ty * tile, min((ty + 1) * tile, height)):
                        for px in range(tx * tile, min((tx + 1) * tile, width)):
                            # replay the forward sweep to find contributors
                            T = 1
                            n = 0
                            for j in range(tile_ptr[ty * tiles_x + tx], tile_ptr[ty * tiles_x + tx + 1]):
                                g = tile_ids[j]
                                dx = px + <real>0.5 - means2d[g, 0]
                                dy = py + <real>0.5 - means2d[g, 1]
                                q = conics[g, 0] * dx * dx + 2 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                                raw = opac[g] * <real>exp(<real>-0.5 * q)
                                alpha = raw
                                if alpha > alpha_max:
                                    alpha = <real>alpha_max
                                if alpha < alpha_cutoff:
                                    continue
                                test_T = T * (1 - alpha)
                                if test_T < t_floor:
                                    break
                                idx[n] = g
                                abuf[n] = alpha
                                tbuf[n] = T
                                cbuf[n] = raw > alpha_max
                                n += 1
                                T = test_T
                            for k in range(nfeat):
                                S[k] = T * bg[k]
                            for i in range(n - 1, -1, -1):
                                g = idx[i]
                                a = abuf[i]
                                Ti = tbuf[i]
                                ga = 0
                                for k in range(nfeat):
                                    g_feats[g, k] += g_out[py, px, k] * a * Ti
                                    ga += g_out[py, px, k] * (Ti * feats[g, k] - S[k] / (1 - a))
                                    S[k] += feats[g, k] * a * Ti
                                if cbuf[i]:
                                    continue
                                dxd = px + 0.5 - <double>means2d[g, 0]
                                dyd = py + 0.5 - <double>means2d[g, 1]
                                G = exp(-0.5 * (conics[g, 0] * dxd * dxd + 2 * conics[g, 1] * dxd * dyd
                                                 + conics[g, 2] * dyd * dyd))
                                g_opac[g] += ga * G
                                gq = -0.5 * ga * opac[g] * G
                                g_conics[g, 0] += gq * dxd * dxd
                                g_conics[g, 1] += gq * 2 * dxd * dyd
                                g_conics[g, 2] += gq * dyd * dyd
                                g_means[g, 0] -= gq * (2 * conics[g, 0] * dxd + 2 * conics[g, 1] * dyd)
                                g_means[g, 1] -= gq * (2 * conics[g, 1] * dxd + 2 * conics[g, 2] * dyd)
    finally:
        free(idx); free(abuf); free(tbuf); free(cbuf)
