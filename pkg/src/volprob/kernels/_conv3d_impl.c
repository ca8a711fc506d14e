/* Direct 3D correlation kernels, float64, single-threaded.
 *
 * The k=3/stride-1 paths fuse the three x-axis taps into one pass over
 * each output row through a local accumulator, which keeps the loop
 * store-light enough to vectorize well. k=1/stride-1/pad-0 gets a
 * channel-blocked pointwise path. Everything else falls through to
 * generic loops that handle any odd k, stride, and padding.
 *
 * Summation order is fixed for every path, so repeated calls produce
 * bit-identical results.
 */

#include <stdlib.h>
#include <string.h>

#include "_conv3d_impl.h"

#define VP_STACK_W 2048

/* Let the compiler reassociate the reduction chains in the weight
 * gradients; without this they serialize on FMA latency. Summation
 * order is still fixed at build time, so results stay reproducible. */
#if defined(__GNUC__) && !defined(__clang__)
#define VP_REASSOC __attribute__((optimize("unsafe-math-optimizations")))
#else
#define VP_REASSOC
#endif

static int out_extent(int n, int k, int s, int p) {
    return (n + 2 * p - k) / s + 1;
}

static int imax(int a, int b) { return a > b ? a : b; }
static int imin(int a, int b) { return a < b ? a : b; }

/* smallest o with o*s + off - p >= 0 */
static int lo_of(int p, int off, int s) {
    int num = p - off;
    return num <= 0 ? 0 : (num + s - 1) / s;
}

/* largest o with o*s + off - p <= n - 1, clamped to the output extent */
static int hi_of(int n, int p, int off, int s, int n_out) {
    int num = n - 1 + p - off;
    int hi;
    if (num < 0)
        return -1;
    hi = num / s;
    return hi > n_out - 1 ? n_out - 1 : hi;
}

/* ------------------------------------------------------------------ */
/* generic paths                                                       */
/* ------------------------------------------------------------------ */

static void fwd_generic(const double *x, const double *w, double *out,
                        int cin, int d, int h, int wd,
                        int cout, int k, int s, int p) {
    int do_ = out_extent(d, k, s, p);
    int ho = out_extent(h, k, s, p);
    int wo = out_extent(wd, k, s, p);
    for (int co = 0; co < cout; co++)
        for (int oz = 0; oz < do_; oz++)
            for (int oy = 0; oy < ho; oy++) {
                double *orow = out + (((long)co * do_ + oz) * ho + oy) * wo;
                for (int ci = 0; ci < cin; ci++)
                    for (int kz = 0; kz < k; kz++) {
                        int iz = oz * s + kz - p;
                        if (iz < 0 || iz >= d) continue;
                        for (int ky = 0; ky < k; ky++) {
                            int iy = oy * s + ky - p;
                            if (iy < 0 || iy >= h) continue;
                            const double *xr = x + (((long)ci * d + iz) * h + iy) * wd;
                            const double *wr = w + ((((long)co * cin + ci) * k + kz) * k + ky) * k;
                            for (int kx = 0; kx < k; kx++) {
                                double wv = wr[kx];
                                int lo = lo_of(p, kx, s);
                                int hi = hi_of(wd, p, kx, s, wo);
                                for (int ox = lo; ox <= hi; ox++)
                                    orow[ox] += wv * xr[ox * s + kx - p];
                            }
                        }
                    }
            }
}

static void bwd_input_generic(const double *g, const double *w, double *gx,
                              int cin, int d, int h, int wd,
                              int cout, int k, int s, int p) {
    int do_ = out_extent(d, k, s, p);
    int ho = out_extent(h, k, s, p);
    int wo = out_extent(wd, k, s, p);
    for (int ci = 0; ci < cin; ci++)
        for (int co = 0; co < cout; co++)
            for (int oz = 0; oz < do_; oz++)
                for (int oy = 0; oy < ho; oy++) {
                    const double *grow = g + (((long)co * do_ + oz) * ho + oy) * wo;
                    for (int kz = 0; kz < k; kz++) {
                        int iz = oz * s + kz - p;
                        if (iz < 0 || iz >= d) continue;
                        for (int ky = 0; ky < k; ky++) {
                            int iy = oy * s + ky - p;
                            if (iy < 0 || iy >= h) continue;
                            double *gxr = gx + (((long)ci * d + iz) * h + iy) * wd;
                            const double *wr = w + ((((long)co * cin + ci) * k + kz) * k + ky) * k;
                            for (int kx = 0; kx < k; kx++) {
                                double wv = wr[kx];
                                int lo = lo_of(p, kx, s);
                                int hi = hi_of(wd, p, kx, s, wo);
                                for (int ox = lo; ox <= hi; ox++)
                                    gxr[ox * s + kx - p] += wv * grow[ox];
                            }
                        }
                    }
                }
}

VP_REASSOC
static void bwd_kernel_generic(const double *g, const double *x, double *gw,
                               int cin, int d, int h, int wd,
                               int cout, int k, int s, int p) {
    int do_ = out_extent(d, k, s, p);
    int ho = out_extent(h, k, s, p);
    int wo = out_extent(wd, k, s, p);
    for (int co = 0; co < cout; co++)
        for (int ci = 0; ci < cin; ci++)
            for (int kz = 0; kz < k; kz++)
                for (int ky = 0; ky < k; ky++)
                    for (int kx = 0; kx < k; kx++) {
                        int lo = lo_of(p, kx, s);
                        int hi = hi_of(wd, p, kx, s, wo);
                        double a0 = 0, a1 = 0, a2 = 0, a3 = 0, acc = 0;
                        for (int oz = 0; oz < do_; oz++) {
                            int iz = oz * s + kz - p;
                            if (iz < 0 || iz >= d) continue;
                            for (int oy = 0; oy < ho; oy++) {
                                int iy = oy * s + ky - p;
                                if (iy < 0 || iy >= h) continue;
                                const double *grow = g + (((long)co * do_ + oz) * ho + oy) * wo;
                                const double *xr = x + (((long)ci * d + iz) * h + iy) * wd;
                                int n4 = lo + ((hi + 1 - lo) & ~3);
                                int ox = lo;
                                for (; ox < n4; ox += 4) {
                                    a0 += grow[ox] * xr[ox * s + kx - p];
                                    a1 += grow[ox + 1] * xr[(ox + 1) * s + kx - p];
                                    a2 += grow[ox + 2] * xr[(ox + 2) * s + kx - p];
                                    a3 += grow[ox + 3] * xr[(ox + 3) * s + kx - p];
                                }
                                for (; ox <= hi; ox++)
                                    acc += grow[ox] * xr[ox * s + kx - p];
                            }
                        }
                        gw[((((long)co * cin + ci) * k + kz) * k + ky) * k + kx] =
                            acc + a0 + a1 + a2 + a3;
                    }
}

/* ------------------------------------------------------------------ */
/* k = 3, stride 1                                                     */
/* ------------------------------------------------------------------ */

static void fwd_k3s1(const double *x, const double *w, double *out,
                     int cin, int d, int h, int wd, int cout, int p) {
    int do_ = d + 2 * p - 2, ho = h + 2 * p - 2, wo = wd + 2 * p - 2;
    int ilo = imin(p, wo);             /* first all-tap column */
    int ihi = imin(wo - 1, wd + p - 3);  /* last all-tap column */
    double stack_acc[VP_STACK_W];
    double *acc = wo <= VP_STACK_W ? stack_acc : malloc((size_t)wo * sizeof(double));
    for (int co = 0; co < cout; co++)
        for (int oz = 0; oz < do_; oz++)
            for (int oy = 0; oy < ho; oy++) {
                memset(acc, 0, (size_t)wo * sizeof(double));
                for (int ci = 0; ci < cin; ci++)
                    for (int kz = 0; kz < 3; kz++) {
                        int iz = oz + kz - p;
                        if (iz < 0 || iz >= d) continue;
                        for (int ky = 0; ky < 3; ky++) {
                            int iy = oy + ky - p;
                            if (iy < 0 || iy >= h) continue;
                            const double *xr = x + (((long)ci * d + iz) * h + iy) * wd;
                            const double *wr = w + ((((long)co * cin + ci) * 3 + kz) * 3 + ky) * 3;
                            double w0 = wr[0], w1 = wr[1], w2 = wr[2];
                            for (int ox = ilo; ox <= ihi; ox++)
                                acc[ox] += w0 * xr[ox - p] + w1 * xr[ox - p + 1] + w2 * xr[ox - p + 2];
                            for (int ox = 0; ox < ilo; ox++)
                                for (int kx = 0; kx < 3; kx++) {
                                    int ix = ox + kx - p;
                                    if (ix >= 0 && ix < wd) acc[ox] += wr[kx] * xr[ix];
                                }
                            for (int ox = imax(ihi + 1, ilo); ox < wo; ox++)
                                for (int kx = 0; kx < 3; kx++) {
                                    int ix = ox + kx - p;
                                    if (ix >= 0 && ix < wd) acc[ox] += wr[kx] * xr[ix];
                                }
                        }
                    }
                memcpy(out + (((long)co * do_ + oz) * ho + oy) * wo, acc,
                       (size_t)wo * sizeof(double));
            }
    if (acc != stack_acc) free(acc);
}

static void bwd_input_k3s1(const double *g, const double *w, double *gx,
                           int cin, int d, int h, int wd, int cout, int p) {
    int do_ = d + 2 * p - 2, ho = h + 2 * p - 2, wo = wd + 2 * p - 2;
    int ilo = imax(0, 2 - p);            /* first column fed by all taps */
    int ihi = imin(wd - 1, wo - 1 - p);  /* last column fed by all taps */
    double stack_acc[VP_STACK_W];
    double *acc = wd <= VP_STACK_W ? stack_acc : malloc((size_t)wd * sizeof(double));
    for (int ci = 0; ci < cin; ci++)
        for (int iz = 0; iz < d; iz++)
            for (int iy = 0; iy < h; iy++) {
                memset(acc, 0, (size_t)wd * sizeof(double));
                for (int co = 0; co < cout; co++)
                    for (int kz = 0; kz < 3; kz++) {
                        int oz = iz - kz + p;
                        if (oz < 0 || oz >= do_) continue;
                        for (int ky = 0; ky < 3; ky++) {
                            int oy = iy - ky + p;
                            if (oy < 0 || oy >= ho) continue;
                            const double *gr = g + (((long)co * do_ + oz) * ho + oy) * wo;
                            const double *wr = w + ((((long)co * cin + ci) * 3 + kz) * 3 + ky) * 3;
                            double w0 = wr[0], w1 = wr[1], w2 = wr[2];
                            for (int ix = ilo; ix <= ihi; ix++)
                                acc[ix] += w0 * gr[ix + p] + w1 * gr[ix + p - 1] + w2 * gr[ix + p - 2];
                            for (int ix = 0; ix < ilo; ix++)
                                for (int kx = 0; kx < 3; kx++) {
                                    int ox = ix - kx + p;
                                    if (ox >= 0 && ox < wo) acc[ix] += wr[kx] * gr[ox];
                                }
                            for (int ix = imax(ihi + 1, ilo); ix < wd; ix++)
                                for (int kx = 0; kx < 3; kx++) {
                                    int ox = ix - kx + p;
                                    if (ox >= 0 && ox < wo) acc[ix] += wr[kx] * gr[ox];
                                }
                        }
                    }
                memcpy(gx + (((long)ci * d + iz) * h + iy) * wd, acc,
                       (size_t)wd * sizeof(double));
            }
    if (acc != stack_acc) free(acc);
}

VP_REASSOC
static void bwd_kernel_k3s1(const double *g, const double *x, double *gw,
                            int cin, int d, int h, int wd, int cout, int p) {
    int do_ = d + 2 * p - 2, ho = h + 2 * p - 2, wo = wd + 2 * p - 2;
    int ilo = imin(p, wo);
    int ihi = imin(wo - 1, wd + p - 3);
    for (int co = 0; co < cout; co++)
        for (int ci = 0; ci < cin; ci++)
            for (int kz = 0; kz < 3; kz++)
                for (int ky = 0; ky < 3; ky++) {
                    double s0 = 0, s1 = 0, s2 = 0;
                    for (int oz = 0; oz < do_; oz++) {
                        int iz = oz + kz - p;
                        if (iz < 0 || iz >= d) continue;
                        for (int oy = 0; oy < ho; oy++) {
                            int iy = oy + ky - p;
                            if (iy < 0 || iy >= h) continue;
                            const double *gr = g + (((long)co * do_ + oz) * ho + oy) * wo;
                            const double *xr = x + (((long)ci * d + iz) * h + iy) * wd;
                            for (int ox = ilo; ox <= ihi; ox++) {
                                double ga = gr[ox];
                                s0 += ga * xr[ox - p];
                                s1 += ga * xr[ox - p + 1];
                                s2 += ga * xr[ox - p + 2];
                            }
                            for (int kx = 0; kx < 3; kx++) {
                                int lo = imax(0, p - kx);
                                int hi = imin(wo - 1, wd - 1 + p - kx);
                                /* left half must not pass hi, and the right half
                                   must not rescan it when [ilo,ihi] is empty */
                                int cut = imin(ilo, hi + 1);
                                double e = 0;
                                for (int oxe = lo; oxe < cut; oxe++)
                                    e += gr[oxe] * xr[oxe + kx - p];
                                for (int oxe = imax(ihi + 1, cut); oxe <= hi; oxe++)
                                    e += gr[oxe] * xr[oxe + kx - p];
                                if (kx == 0) s0 += e;
                                else if (kx == 1) s1 += e;
                                else s2 += e;
                            }
                        }
                    }
                    double *gwr = gw + ((((long)co * cin + ci) * 3 + kz) * 3 + ky) * 3;
                    gwr[0] = s0;
                    gwr[1] = s1;
                    gwr[2] = s2;
                }
}

/* ------------------------------------------------------------------ */
/* k = 1, stride 1, no padding: pointwise channel mix                  */
/* ------------------------------------------------------------------ */

static void fwd_k1s1(const double *x, const double *w, double *out,
                     int cin, long n, int cout) {
    for (int co = 0; co < cout; co++) {
        double *orow = out + (long)co * n;
        const double *wr = w + (long)co * cin;
        int ci = 0;
        for (; ci + 3 < cin; ci += 4) {
            const double *x0 = x + (long)ci * n;
            const double *x1 = x0 + n;
            const double *x2 = x1 + n;
            const double *x3 = x2 + n;
            double w0 = wr[ci], w1 = wr[ci + 1], w2 = wr[ci + 2], w3 = wr[ci + 3];
            for (long j = 0; j < n; j++)
                orow[j] += w0 * x0[j] + w1 * x1[j] + w2 * x2[j] + w3 * x3[j];
        }
        for (; ci < cin; ci++) {
            const double *x0 = x + (long)ci * n;
            double w0 = wr[ci];
            for (long j = 0; j < n; j++)
                orow[j] += w0 * x0[j];
        }
    }
}

static void bwd_input_k1s1(const double *g, const double *w, double *gx,
                           int cin, long n, int cout) {
    for (int ci = 0; ci < cin; ci++) {
        double *gxr = gx + (long)ci * n;
        int co = 0;
        for (; co + 3 < cout; co += 4) {
            const double *g0 = g + (long)co * n;
            const double *g1 = g0 + n;
            const double *g2 = g1 + n;
            const double *g3 = g2 + n;
            double w0 = w[(long)co * cin + ci];
            double w1 = w[(long)(co + 1) * cin + ci];
            double w2 = w[(long)(co + 2) * cin + ci];
            double w3 = w[(long)(co + 3) * cin + ci];
            for (long j = 0; j < n; j++)
                gxr[j] += w0 * g0[j] + w1 * g1[j] + w2 * g2[j] + w3 * g3[j];
        }
        for (; co < cout; co++) {
            const double *g0 = g + (long)co * n;
            double w0 = w[(long)co * cin + ci];
            for (long j = 0; j < n; j++)
                gxr[j] += w0 * g0[j];
        }
    }
}

VP_REASSOC
static void bwd_kernel_k1s1(const double *g, const double *x, double *gw,
                            int cin, long n, int cout) {
    for (int co = 0; co < cout; co++)
        for (int ci = 0; ci < cin; ci++) {
            const double *gr = g + (long)co * n;
            const double *xr = x + (long)ci * n;
            double a0 = 0, a1 = 0, a2 = 0, a3 = 0, acc = 0;
            long n4 = n & ~3L;
            long j = 0;
            for (; j < n4; j += 4) {
                a0 += gr[j] * xr[j];
                a1 += gr[j + 1] * xr[j + 1];
                a2 += gr[j + 2] * xr[j + 2];
                a3 += gr[j + 3] * xr[j + 3];
            }
            for (; j < n; j++)
                acc += gr[j] * xr[j];
            gw[(long)co * cin + ci] = acc + a0 + a1 + a2 + a3;
        }
}

/* ------------------------------------------------------------------ */
/* dispatch                                                            */
/* ------------------------------------------------------------------ */

void vp_conv3d_forward(const double *x, const double *w, double *out,
                       int cin, int d, int h, int wd,
                       int cout, int k, int s, int p) {
    if (s == 1 && k == 3)
        fwd_k3s1(x, w, out, cin, d, h, wd, cout, p);
    else if (s == 1 && k == 1 && p == 0)
        fwd_k1s1(x, w, out, cin, (long)d * h * wd, cout);
    else
        fwd_generic(x, w, out, cin, d, h, wd, cout, k, s, p);
}

void vp_conv3d_backward_input(const double *g, const double *w, double *gx,
                              int cin, int d, int h, int wd,
                              int cout, int k, int s, int p) {
    if (s == 1 && k == 3)
        bwd_input_k3s1(g, w, gx, cin, d, h, wd, cout, p);
    else if (s == 1 && k == 1 && p == 0)
        bwd_input_k1s1(g, w, gx, cin, (long)d * h * wd, cout);
    else
        bwd_input_generic(g, w, gx, cin, d, h, wd, cout, k, s, p);
}

void vp_conv3d_backward_kernel(const double *g, const double *x, double *gw,
                               int cin, int d, int h, int wd,
                               int cout, int k, int s, int p) {
    if (s == 1 && k == 3)
        bwd_kernel_k3s1(g, x, gw, cin, d, h, wd, cout, p);
    else if (s == 1 && k == 1 && p == 0)
        bwd_kernel_k1s1(g, x, gw, cin, (long)d * h * wd, cout);
    else
        bwd_kernel_generic(g, x, gw, cin, d, h, wd, cout, k, s, p);
}
