"""Pure numpy 3D convolution kernels.

Fallback backend with the same call signatures and float64 semantics as
the compiled extension. Direct convolution: one shifted view per kernel
offset, channels contracted with tensordot. No FFT, no im2col buffers.

Layouts: inputs are (Cin, D, H, W), kernels (Cout, Cin, k, k, k), all
float64 C-order. Zero padding, cubic kernels with odd k, uniform stride.
"""

import numpy as np


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d_forward(x, w, stride=1, padding=0):
    """Correlate x (Cin,D,H,W) with w (Cout,Cin,k,k,k) -> (Cout,D',H',W')."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, d, h, wd = x.shape
    cout, _, k = w.shape[0], w.shape[1], w.shape[2]
    s, p = stride, padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p))) if p else x
    do = _out_extent(d, k, s, p)
    ho = _out_extent(h, k, s, p)
    wo = _out_extent(wd, k, s, p)
    out = np.zeros((cout, do, ho, wo))
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                win = xp[:, kz:kz + s * (do - 1) + 1:s,
                         ky:ky + s * (ho - 1) + 1:s,
                         kx:kx + s * (wo - 1) + 1:s]
                out += np.tensordot(w[:, :, kz, ky, kx], win, axes=(1, 0))
    return out


def conv3d_backward_input(gout, w, x_shape, stride=1, padding=0):
    """Gradient of conv3d_forward w.r.t. x, given upstream gout."""
    gout = np.asarray(gout, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, d, h, wd = x_shape
    k = w.shape[2]
    s, p = stride, padding
    do, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    gxp = np.zeros((cin, d + 2 * p, h + 2 * p, wd + 2 * p))
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                view = gxp[:, kz:kz + s * (do - 1) + 1:s,
                           ky:ky + s * (ho - 1) + 1:s,
                           kx:kx + s * (wo - 1) + 1:s]
                view += np.tensordot(w[:, :, kz, ky, kx], gout, axes=(0, 0))
    if p:
        return np.ascontiguousarray(gxp[:, p:p + d, p:p + h, p:p + wd])
    return gxp


def conv3d_backward_kernel(gout, x, k, stride=1, padding=0):
    """Gradient of conv3d_forward w.r.t. w, given upstream gout."""
    gout = np.asarray(gout, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    cin = x.shape[0]
    cout = gout.shape[0]
    s, p = stride, padding
    do, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p))) if p else x
    gw = np.zeros((cout, cin, k, k, k))
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                win = xp[:, kz:kz + s * (do - 1) + 1:s,
                         ky:ky + s * (ho - 1) + 1:s,
                         kx:kx + s * (wo - 1) + 1:s]
                gw[:, :, kz, ky, kx] = np.tensordot(gout, win,
                                                    axes=([1, 2, 3], [1, 2, 3]))
    return gw
