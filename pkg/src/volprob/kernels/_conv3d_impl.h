#ifndef VP_CONV3D_IMPL_H
#define VP_CONV3D_IMPL_H

/* Direct 3D correlation kernels over float64 C-order arrays.
 *
 * x: (cin, d, h, wd), w: (cout, cin, k, k, k), out: (cout, d', h', wd')
 * with n' = (n + 2p - k)/s + 1. Output buffers must be zero-filled by
 * the caller. k odd, s >= 1, p >= 0.
 */

void vp_conv3d_forward(const double *x, const double *w, double *out,
                       int cin, int d, int h, int wd,
                       int cout, int k, int s, int p);

void vp_conv3d_backward_input(const double *g, const double *w, double *gx,
                              int cin, int d, int h, int wd,
                              int cout, int k, int s, int p);

void vp_conv3d_backward_kernel(const double *g, const double *x, double *gw,
                               int cin, int d, int h, int wd,
                               int cout, int k, int s, int p);

#endif
