/* Vectorized inner loops for the convolution kernels.
 *
 * Eight output sites are processed as one vector lane-set; each lane
 * accumulates its own site's sum over k in ascending order with separate
 * mul/add roundings (build with -ffp-contract=off), so blocking and
 * vectorization never change per-site results.
 */
#ifndef COMBNET_MICROKERNEL_H
#define COMBNET_MICROKERNEL_H

#include <string.h>

typedef double combnet_v8 __attribute__((vector_size(64)));

static inline void combnet_tile_gemm(const double *restrict tile,
                                     const double *restrict wt,
                                     int klen, int nj,
                                     double *restrict acc)
{
    int j = 0;
    for (; j + 4 <= nj; j += 4) {
        combnet_v8 a0 = {0}, a1 = {0}, a2 = {0}, a3 = {0}, tv;
        for (int k = 0; k < klen; ++k) {
            memcpy(&tv, tile + (size_t)k * 8, sizeof tv);
            const double *wr = wt + (size_t)k * nj + j;
            a0 += wr[0] * tv;
            a1 += wr[1] * tv;
            a2 += wr[2] * tv;
            a3 += wr[3] * tv;
        }
        memcpy(acc + (size_t)(j + 0) * 8, &a0, sizeof a0);
        memcpy(acc + (size_t)(j + 1) * 8, &a1, sizeof a1);
        memcpy(acc + (size_t)(j + 2) * 8, &a2, sizeof a2);
        memcpy(acc + (size_t)(j + 3) * 8, &a3, sizeof a3);
    }
    for (; j < nj; ++j) {
        combnet_v8 a0 = {0}, tv;
        for (int k = 0; k < klen; ++k) {
            memcpy(&tv, tile + (size_t)k * 8, sizeof tv);
            a0 += wt[(size_t)k * nj + j] * tv;
        }
        memcpy(acc + (size_t)j * 8, &a0, sizeof a0);
    }
}

static inline void combnet_saxpy(double g, const double *restrict src,
                                 double *restrict dst, int n)
{
    for (int i = 0; i < n; ++i)
        dst[i] += g * src[i];
}

/* gwrow[kk] += sum_t gj[t] * cols[t*klen + kk]; cols are site-major.
 * The t-sum stays in registers, so consecutive sites do not chain through
 * memory. */
static inline void combnet_bwd_gw(const double *restrict cols,
                                  const double *restrict gj,
                                  double *restrict gwrow,
                                  int nt, int klen)
{
    int kk = 0;
    for (; kk + 8 <= klen; kk += 8) {
        combnet_v8 acc, cv;
        memcpy(&acc, gwrow + kk, sizeof acc);
        for (int t = 0; t < nt; ++t) {
            memcpy(&cv, cols + (size_t)t * klen + kk, sizeof cv);
            acc += gj[t] * cv;
        }
        memcpy(gwrow + kk, &acc, sizeof acc);
    }
    for (; kk < klen; ++kk) {
        double acc = gwrow[kk];
        for (int t = 0; t < nt; ++t)
            acc += gj[t] * cols[(size_t)t * klen + kk];
        gwrow[kk] = acc;
    }
}

#endif
