# cython: boundscheck=False, wraparound=False, language_level=3
"""Compiled 3D convolution kernels.

Thin wrappers over the C implementation in _conv3d_impl.c, with the
same signatures and float64 semantics as kernels.reference. Summation
order is fixed, so results are reproducible run to run.
"""

import numpy as np


cdef extern from "_conv3d_impl.h":
    void vp_conv3d_forward(const double *x, const double *w, double *out,
                           int cin, int d, int h, int wd,
                           int cout, int k, int s, int p) nogil
    void vp_conv3d_backward_input(const double *g, const double *w, double *gx,
                                  int cin, int d, int h, int wd,
                                  int cout, int k, int s, int p) nogil
    void vp_conv3d_backward_kernel(const double *g, const double *x, double *gw,
                                   int cin, int d, int h, int wd,
                                   int cout, int k, int s, int p) nogil


def conv3d_forward(x, w, int stride=1, int padding=0):
    """Correlate x (Cin,D,H,W) with w (Cout,Cin,k,k,k) -> (Cout,D',H',W')."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, :, ::1] wv = w
    cdef int cin = xv.shape[0], d = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef int cout = wv.shape[0], k = wv.shape[2]
    cdef int do_ = (d + 2 * padding - k) // stride + 1
    cdef int ho = (h + 2 * padding - k) // stride + 1
    cdef int wo = (wd + 2 * padding - k) // stride + 1
    out_arr = np.zeros((cout, do_, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        vp_conv3d_forward(&xv[0, 0, 0, 0], &wv[0, 0, 0, 0, 0], &out[0, 0, 0, 0],
                          cin, d, h, wd, cout, k, stride, padding)
    return out_arr


def conv3d_backward_input(gout, w, x_shape, int stride=1, int padding=0):
    """Gradient of conv3d_forward w.r.t. x, given upstream gout."""
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = gout
    cdef double[:, :, :, :, ::1] wv = w
    cdef int cin = x_shape[0], d = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef int cout = gv.shape[0], k = wv.shape[2]
    gx_arr = np.zeros((cin, d, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    with nogil:
        vp_conv3d_backward_input(&gv[0, 0, 0, 0], &wv[0, 0, 0, 0, 0], &gx[0, 0, 0, 0],
                                 cin, d, h, wd, cout, k, stride, padding)
    return gx_arr


def conv3d_backward_kernel(gout, x, int k, int stride=1, int padding=0):
    """Gradient of conv3d_forward w.r.t. w, given upstream gout."""
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] gv = gout
    cdef double[:, :, :, ::1] xv = x
    cdef int cin = xv.shape[0], d = xv.shape[1], h = xv.shape[2], wd = xv.shape[3]
    cdef int cout = gv.shape[0]
    gw_arr = np.zeros((cout, cin, k, k, k), dtype=np.float64)
    cdef double[:, :, :, :, ::1] gw = gw_arr
    with nogil:
        vp_conv3d_backward_kernel(&gv[0, 0, 0, 0], &xv[0, 0, 0, 0], &gw[0, 0, 0, 0, 0],
                                  cin, d, h, wd, cout, k, stride, padding)
    return gw_arr
