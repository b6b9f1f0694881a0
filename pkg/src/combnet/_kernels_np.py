"""Pure-numpy convolution kernels (fallback backend).

Implements the same four entry points as the compiled extension.  Per output
site, partial products are accumulated in (in-channel, kernel-row, kernel-col)
order with one rounding per multiply and one per add, which makes results
bit-identical to the compiled kernels and to the sparse matrix-vector form.
The comb forward path only gathers input columns at convolution sites, so it
skips the masked-out convolution work just like the compiled fast path.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def _out_hw(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _parity_sites(h_out, w_out, parity):
    pp, qq = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    sel = (pp + qq) % 2 == parity
    return pp[sel], qq[sel]


def _source_grids(h_out, w_out, k, stride, pad, h_in, w_in):
    sp = np.clip(np.arange(h_out) * stride + k // 2 - pad, 0, h_in - 1)
    sq = np.clip(np.arange(w_out) * stride + k // 2 - pad, 0, w_in - 1)
    return sp, sq


def conv2d_forward(x, w, stride, pad, groups):
    n, c_in, h, wd = x.shape
    c_out, c_in_g, k, _ = w.shape
    h_out, w_out = _out_hw(h, wd, k, stride, pad)
    xp = _pad(x, pad)
    y = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    c_out_g = c_out // groups
    for g in range(groups):
        j0 = g * c_out_g
        wg = w[j0:j0 + c_out_g]
        for cl in range(c_in_g):
            c = g * c_in_g + cl
            for u in range(k):
                for v in range(k):
                    patch = xp[:, c, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
                    y[:, j0:j0 + c_out_g] += (
                        wg[:, cl, u, v][None, :, None, None] * patch[:, None]
                    )
    return y


def _uniform_map(x, g, c_in_g, inv_d, sp, sq):
    """Channel-average of the group's input at the source grid, (N, H_out, W_out)."""
    n = x.shape[0]
    u = np.zeros((n, sp.size, sq.size), dtype=np.float64)
    for cl in range(c_in_g):
        u += inv_d * x[:, g * c_in_g + cl][:, sp][:, :, sq]
    return u


def comb_forward(x, w, stride, pad, groups, chan_phase, inv_d):
    n, c_in, h, wd = x.shape
    c_out, c_in_g, k, _ = w.shape
    h_out, w_out = _out_hw(h, wd, k, stride, pad)
    xp = _pad(x, pad)
    y = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    c_out_g = c_out // groups
    sp, sq = _source_grids(h_out, w_out, k, stride, pad, h, wd)
    for g in range(groups):
        j0 = g * c_out_g
        phases = chan_phase[j0:j0 + c_out_g]
        umap = _uniform_map(x, g, c_in_g, inv_d, sp, sq)
        for parity in (0, 1):
            jsel = np.nonzero(phases == parity)[0] + j0
            if jsel.size == 0:
                continue
            # convolution sites for these channels: (p + q) % 2 == parity
            pi, qi = _parity_sites(h_out, w_out, parity)
            acc = np.zeros((n, jsel.size, pi.size), dtype=np.float64)
            for cl in range(c_in_g):
                c = g * c_in_g + cl
                for u in range(k):
                    for v in range(k):
                        xg = xp[:, c, pi * stride + u, qi * stride + v]
                        acc += w[jsel, cl, u, v][None, :, None] * xg[:, None, :]
            y[:, jsel[:, None], pi[None, :], qi[None, :]] = acc
            # uniform sites are the complementary checkerboard
            pm, qm = _parity_sites(h_out, w_out, 1 - parity)
            y[:, jsel[:, None], pm[None, :], qm[None, :]] = umap[:, pm, qm][:, None, :]
    return y


def conv2d_backward(x, w, go, stride, pad, groups):
    n, c_in, h, wd = x.shape
    c_out, c_in_g, k, _ = w.shape
    h_out, w_out = go.shape[2], go.shape[3]
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    c_out_g = c_out // groups
    for g in range(groups):
        j0 = g * c_out_g
        gog = go[:, j0:j0 + c_out_g]
        for cl in range(c_in_g):
            c = g * c_in_g + cl
            for u in range(k):
                for v in range(k):
                    patch = xp[:, c, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
                    gw[j0:j0 + c_out_g, cl, u, v] += np.einsum("njpq,npq->j", gog, patch)
                    gxp[:, c, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += (
                        np.einsum("njpq,j->npq", gog, w[j0:j0 + c_out_g, cl, u, v])
                    )
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw


def comb_backward(x, w, go, stride, pad, groups, chan_phase, inv_d):
    n, c_in, h, wd = x.shape
    c_out, c_in_g, k, _ = w.shape
    h_out, w_out = go.shape[2], go.shape[3]
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp)
    gx_uni = np.zeros_like(x)
    gw = np.zeros_like(w)
    c_out_g = c_out // groups
    sp, sq = _source_grids(h_out, w_out, k, stride, pad, h, wd)
    for g in range(groups):
        j0 = g * c_out_g
        phases = chan_phase[j0:j0 + c_out_g]
        for parity in (0, 1):
            jsel = np.nonzero(phases == parity)[0] + j0
            if jsel.size == 0:
                continue
            pi, qi = _parity_sites(h_out, w_out, parity)
            go_sel = go[:, jsel[:, None], pi[None, :], qi[None, :]]  # (N, J', S)
            for cl in range(c_in_g):
                c = g * c_in_g + cl
                for u in range(k):
                    for v in range(k):
                        xg = xp[:, c, pi * stride + u, qi * stride + v]
                        gw[jsel, cl, u, v] += np.einsum("njs,ns->j", go_sel, xg)
                        gxp[:, c, pi * stride + u, qi * stride + v] += np.einsum(
                            "njs,j->ns", go_sel, w[jsel, cl, u, v]
                        )
            # uniform branch: route 1/D of each masked-site gradient to the
            # source coordinate of every input channel in the group
            pm, qm = _parity_sites(h_out, w_out, 1 - parity)
            go_m = inv_d * go[:, jsel[:, None], pm[None, :], qm[None, :]].sum(axis=1)
            spm, sqm = sp[pm], sq[qm]
            for cl in range(c_in_g):
                c = g * c_in_g + cl
                np.add.at(gx_uni[:, c], (slice(None), spm, sqm), go_m)
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    gx = np.ascontiguousarray(gx) + gx_uni
    return gx, gw
