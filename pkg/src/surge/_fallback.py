"""Pure-numpy implementations of the kernels in ``_kernels.pyx``."""
import numpy as np


def sign_matmul(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"sign_matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[1]})")
    # +-1 products summed in float64 are exact for any realistic k
    return a @ b.T


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_same(x, w):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, _, h, wd = x.shape
    k = w.shape[2]
    xp = _pad(x, k // 2)
    out = np.zeros((n, w.shape[0], h, wd))
    for di in range(k):
        for dj in range(k):
            out += np.einsum("nchw,oc->nohw", xp[:, :, di:di + h, dj:dj + wd], w[:, :, di, dj])
    return out


def conv2d_same_grad_input(g, w):
    g = np.asarray(g, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, _, h, wd = g.shape
    k = w.shape[2]
    p = k // 2
    gx = np.zeros((n, w.shape[1], h + 2 * p, wd + 2 * p))
    for di in range(k):
        for dj in range(k):
            gx[:, :, di:di + h, dj:dj + wd] += np.einsum("nohw,oc->nchw", g, w[:, :, di, dj])
    return gx[:, :, p:p + h, p:p + wd]


def conv2d_same_grad_weight(x, g, ksize):
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _, _, h, wd = x.shape
    xp = _pad(x, ksize // 2)
    gw = np.zeros((g.shape[1], x.shape[1], ksize, ksize))
    for di in range(ksize):
        for dj in range(ksize):
            gw[:, :, di, dj] = np.einsum("nohw,nchw->oc", g, xp[:, :, di:di + h, dj:dj + wd])
    return gw


def pair_moments(g_b, g_a, g_star):
    g_b = np.asarray(g_b, dtype=np.float64)
    g_a = np.asarray(g_a, dtype=np.float64)
    g_star = np.asarray(g_star, dtype=np.float64)
    if g_a.shape != g_b.shape or g_b.shape[1:] != g_star.shape:
        raise ValueError("pair_moments: sample shapes do not match")
    r = g_b - g_star
    n = g_b.shape[0]
    return (
        float(np.einsum("ij,ij->", r, r)) / n,
        float(np.einsum("ij,ij->", r, g_a)) / n,
        float(np.einsum("ij,ij->", g_a, g_a)) / n,
    )
