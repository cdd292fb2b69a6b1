/* Row kernels for the tiled attention engine.
 *
 * fa_expf is a Cephes-style range-reduced polynomial (about 1 ulp) written
 * without libm calls so the row loops vectorize; inputs below the float
 * underflow threshold (including -inf) return exactly 0.  fa_exp2d is the
 * matching two-lane double version (Cephes rational form, about 1 ulp).
 */
#ifndef FLEXATTN_TILE_H
#define FLEXATTN_TILE_H

#include <math.h>
#include <stdint.h>
#include <string.h>

static inline float fa_expf(float x)
{
    const float lo = -87.33654475f, hi = 88.37626266f;
    const float round_magic = 12582912.0f; /* 1.5 * 2^23 */
    /* underflowing lanes are evaluated at 0 and zeroed at the end, which
     * keeps subnormals (very slow on x86) out of the arithmetic */
    float xc = x < lo ? 0.0f : (x > hi ? hi : x);
    float fn = (xc * 1.44269504088896341f + round_magic) - round_magic;
    float r = xc - fn * 0.693359375f - fn * -2.12194440e-4f;
    float y = 1.9875691500e-4f;
    y = y * r + 1.3981999507e-3f;
    y = y * r + 8.3334519073e-3f;
    y = y * r + 4.1665795894e-2f;
    y = y * r + 1.6666665459e-1f;
    y = y * r + 5.0000001201e-1f;
    y = y * r * r + r + 1.0f;
    int32_t bits = ((int32_t)fn + 127) << 23;
    float scale;
    memcpy(&scale, &bits, sizeof scale);
    return x < lo ? 0.0f : y * scale;
}

#ifdef __SSE2__
#include <emmintrin.h>

/* Four lanes of fa_expf. */
static inline __m128 fa_expf4(__m128 x)
{
    const __m128 lo = _mm_set1_ps(-87.33654475f), hi = _mm_set1_ps(88.37626266f);
    const __m128 magic = _mm_set1_ps(12582912.0f);
    __m128 under = _mm_cmplt_ps(x, lo);
    __m128 xc = _mm_andnot_ps(under, _mm_min_ps(x, hi));
    __m128 fn = _mm_sub_ps(_mm_add_ps(_mm_mul_ps(xc, _mm_set1_ps(1.44269504088896341f)), magic), magic);
    __m128 r = _mm_sub_ps(xc, _mm_mul_ps(fn, _mm_set1_ps(0.693359375f)));
    r = _mm_sub_ps(r, _mm_mul_ps(fn, _mm_set1_ps(-2.12194440e-4f)));
    __m128 y = _mm_set1_ps(1.9875691500e-4f);
    y = _mm_add_ps(_mm_mul_ps(y, r), _mm_set1_ps(1.3981999507e-3f));
    y = _mm_add_ps(_mm_mul_ps(y, r), _mm_set1_ps(8.3334519073e-3f));
    y = _mm_add_ps(_mm_mul_ps(y, r), _mm_set1_ps(4.1665795894e-2f));
    y = _mm_add_ps(_mm_mul_ps(y, r), _mm_set1_ps(1.6666665459e-1f));
    y = _mm_add_ps(_mm_mul_ps(y, r), _mm_set1_ps(5.0000001201e-1f));
    y = _mm_add_ps(_mm_add_ps(_mm_mul_ps(_mm_mul_ps(y, r), r), r), _mm_set1_ps(1.0f));
    __m128i bits = _mm_slli_epi32(_mm_add_epi32(_mm_cvtps_epi32(fn), _mm_set1_epi32(127)), 23);
    return _mm_andnot_ps(under, _mm_mul_ps(y, _mm_castsi128_ps(bits)));
}

/* row[j] <- exp(row[j] - ref); returns the sum. */
static inline float fa_exp_row_f32(float *row, float ref, long n)
{
    __m128 vref = _mm_set1_ps(ref), vsum = _mm_setzero_ps();
    long j = 0;
    for (; j + 4 <= n; j += 4) {
        __m128 p = fa_expf4(_mm_sub_ps(_mm_loadu_ps(row + j), vref));
        _mm_storeu_ps(row + j, p);
        vsum = _mm_add_ps(vsum, p);
    }
    float lanes[4];
    _mm_storeu_ps(lanes, vsum);
    float total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; j < n; ++j) {
        float p = fa_expf(row[j] - ref);
        row[j] = p;
        total += p;
    }
    return total;
}

/* Masked lanes become -inf; returns the row max. */
static inline float fa_mask_max_f32(float *row, const unsigned char *mr, long n)
{
    const __m128 ninf = _mm_set1_ps(-INFINITY);
    const __m128i zero = _mm_setzero_si128();
    __m128 vmax = ninf;
    long j = 0;
    for (; j + 4 <= n; j += 4) {
        __m128 x = _mm_loadu_ps(row + j);
        if (mr) {
            int32_t m4;
            memcpy(&m4, mr + j, 4);
            __m128i b = _mm_unpacklo_epi16(_mm_unpacklo_epi8(_mm_cvtsi32_si128(m4), zero), zero);
            __m128 dead = _mm_castsi128_ps(_mm_cmpeq_epi32(b, zero));
            x = _mm_or_ps(_mm_and_ps(dead, ninf), _mm_andnot_ps(dead, x));
            _mm_storeu_ps(row + j, x);
        }
        vmax = _mm_max_ps(vmax, x);
    }
    float lanes[4];
    _mm_storeu_ps(lanes, vmax);
    float mx = lanes[0];
    for (int t = 1; t < 4; ++t) mx = lanes[t] > mx ? lanes[t] : mx;
    for (; j < n; ++j) {
        float x = (mr && !mr[j]) ? -INFINITY : row[j];
        row[j] = x;
        mx = x > mx ? x : mx;
    }
    return mx;
}

static void fa_softmax_update_sse(float *s, const unsigned char *mask, float *m, float *l,
                                  float *acc, long nq, long nk, long d)
{
    for (long i = 0; i < nq; ++i) {
        float *row = s + i * nk;
        float mx = fa_mask_max_f32(row, mask ? mask + i * nk : 0, nk);
        float m_new = m[i] > mx ? m[i] : mx;
        float ref = m_new == -INFINITY ? 0.0f : m_new;
        float alpha = fa_expf(m[i] - ref);
        float total = fa_exp_row_f32(row, ref, nk);
        l[i] = l[i] * alpha + total;
        if (alpha != 1.0f) {
            float *a = acc + i * d;
            for (long j = 0; j < d; ++j)
                a[j] *= alpha;
        }
        m[i] = m_new;
    }
}

static void fa_softmax_grad_sse(float *s, const float *lse, float *dp, const float *delta,
                                const float *dscore, long nq, long nk)
{
    const __m128 zero = _mm_setzero_ps();
    for (long i = 0; i < nq; ++i) {
        float *row = s + i * nk, *drow = dp + i * nk;
        float ref = lse[i], di = delta[i];
        if (ref == -INFINITY) {
            memset(row, 0, nk * sizeof(float));
            memset(drow, 0, nk * sizeof(float));
            continue;
        }
        const float *g = dscore ? dscore + i * nk : 0;
        __m128 vref = _mm_set1_ps(ref), vdi = _mm_set1_ps(di);
        long j = 0;
        for (; j + 4 <= nk; j += 4) {
            __m128 p = fa_expf4(_mm_sub_ps(_mm_loadu_ps(row + j), vref));
            __m128 ds = _mm_mul_ps(p, _mm_sub_ps(_mm_loadu_ps(drow + j), vdi));
            if (g) ds = _mm_mul_ps(ds, _mm_loadu_ps(g + j));
            _mm_storeu_ps(row + j, p);
            _mm_storeu_ps(drow + j, _mm_andnot_ps(_mm_cmpeq_ps(p, zero), ds));
        }
        for (; j < nk; ++j) {
            float p = fa_expf(row[j] - ref);
            float ds = p * (drow[j] - di);
            if (g) ds *= g[j];
            row[j] = p;
            drow[j] = p == 0.0f ? 0.0f : ds;
        }
    }
}

static inline __m128d fa_exp2d(__m128d x)
{
    const __m128d lo = _mm_set1_pd(-708.3964185322641), hi = _mm_set1_pd(709.782712893384);
    const __m128d magic = _mm_set1_pd(6755399441055744.0); /* 1.5 * 2^52 */
    __m128d under = _mm_cmplt_pd(x, lo);
    __m128d xc = _mm_andnot_pd(under, _mm_min_pd(x, hi));
    __m128d fn = _mm_sub_pd(_mm_add_pd(_mm_mul_pd(xc, _mm_set1_pd(1.4426950408889634073599)), magic), magic);
    __m128d r = _mm_sub_pd(xc, _mm_mul_pd(fn, _mm_set1_pd(6.93145751953125e-1)));
    r = _mm_sub_pd(r, _mm_mul_pd(fn, _mm_set1_pd(1.42860682030941723212e-6)));
    __m128d rr = _mm_mul_pd(r, r);
    __m128d p = _mm_set1_pd(1.26177193074810590878e-4);
    p = _mm_add_pd(_mm_mul_pd(p, rr), _mm_set1_pd(3.02994407707441961300e-2));
    p = _mm_mul_pd(_mm_add_pd(_mm_mul_pd(p, rr), _mm_set1_pd(9.99999999999999999910e-1)), r);
    __m128d q = _mm_set1_pd(3.00198505138664455042e-6);
    q = _mm_add_pd(_mm_mul_pd(q, rr), _mm_set1_pd(2.52448340349684104192e-3));
    q = _mm_add_pd(_mm_mul_pd(q, rr), _mm_set1_pd(2.27265548208155028766e-1));
    q = _mm_add_pd(_mm_mul_pd(q, rr), _mm_set1_pd(2.0));
    __m128d e = _mm_add_pd(_mm_set1_pd(1.0), _mm_mul_pd(_mm_set1_pd(2.0), _mm_div_pd(p, _mm_sub_pd(q, p))));
    /* 2^n split in two factors so n = -1022 .. 1023 never leaves the normal range */
    __m128i n = _mm_cvtpd_epi32(fn);
    __m128i half = _mm_srai_epi32(n, 1);
    __m128i bias = _mm_set1_epi32(1023);
    __m128i e1 = _mm_slli_epi64(_mm_unpacklo_epi32(_mm_add_epi32(half, bias), _mm_setzero_si128()), 52);
    __m128i e2 = _mm_slli_epi64(_mm_unpacklo_epi32(_mm_add_epi32(_mm_sub_epi32(n, half), bias),
                                                   _mm_setzero_si128()), 52);
    e = _mm_mul_pd(_mm_mul_pd(e, _mm_castsi128_pd(e1)), _mm_castsi128_pd(e2));
    return _mm_andnot_pd(under, e);
}

static inline double fa_exp_d(double x)
{
    double out[2];
    _mm_storeu_pd(out, fa_exp2d(_mm_set1_pd(x)));
    return out[0];
}

static void fa_softmax_update_sse_d(double *s, const unsigned char *mask, double *m, double *l,
                                    double *acc, long nq, long nk, long d)
{
    for (long i = 0; i < nq; ++i) {
        double *row = s + i * nk;
        const unsigned char *mr = mask ? mask + i * nk : 0;
        double mx = -INFINITY;
        for (long j = 0; j < nk; ++j) {
            double x = (mr && !mr[j]) ? -INFINITY : row[j];
            row[j] = x;
            mx = x > mx ? x : mx;
        }
        double m_new = m[i] > mx ? m[i] : mx;
        double ref = m_new == -INFINITY ? 0.0 : m_new;
        double alpha = fa_exp_d(m[i] - ref);
        __m128d vref = _mm_set1_pd(ref), vsum = _mm_setzero_pd();
        long j = 0;
        for (; j + 2 <= nk; j += 2) {
            __m128d p = fa_exp2d(_mm_sub_pd(_mm_loadu_pd(row + j), vref));
            _mm_storeu_pd(row + j, p);
            vsum = _mm_add_pd(vsum, p);
        }
        double lanes[2];
        _mm_storeu_pd(lanes, vsum);
        double total = lanes[0] + lanes[1];
        for (; j < nk; ++j) {
            double p = fa_exp_d(row[j] - ref);
            row[j] = p;
            total += p;
        }
        l[i] = l[i] * alpha + total;
        if (alpha != 1.0) {
            double *a = acc + i * d;
            for (long t = 0; t < d; ++t)
                a[t] *= alpha;
        }
        m[i] = m_new;
    }
}

static void fa_softmax_grad_sse_d(double *s, const double *lse, double *dp, const double *delta,
                                  const double *dscore, long nq, long nk)
{
    const __m128d zero = _mm_setzero_pd();
    for (long i = 0; i < nq; ++i) {
        double *row = s + i * nk, *drow = dp + i * nk;
        double ref = lse[i], di = delta[i];
        if (ref == -INFINITY) {
            memset(row, 0, nk * sizeof(double));
            memset(drow, 0, nk * sizeof(double));
            continue;
        }
        const double *g = dscore ? dscore + i * nk : 0;
        __m128d vref = _mm_set1_pd(ref), vdi = _mm_set1_pd(di);
        long j = 0;
        for (; j + 2 <= nk; j += 2) {
            __m128d p = fa_exp2d(_mm_sub_pd(_mm_loadu_pd(row + j), vref));
            __m128d ds = _mm_mul_pd(p, _mm_sub_pd(_mm_loadu_pd(drow + j), vdi));
            if (g) ds = _mm_mul_pd(ds, _mm_loadu_pd(g + j));
            _mm_storeu_pd(row + j, p);
            _mm_storeu_pd(drow + j, _mm_andnot_pd(_mm_cmpeq_pd(p, zero), ds));
        }
        for (; j < nk; ++j) {
            double p = fa_exp_d(row[j] - ref);
            double ds = p * (drow[j] - di);
            if (g) ds *= g[j];
            row[j] = p;
            drow[j] = p == 0.0 ? 0.0 : ds;
        }
    }
}
#endif

#define FA_DEFINE_KERNELS(T, SUFFIX, EXP)                                           \
static void fa_softmax_update_##SUFFIX(T *s, const unsigned char *mask, T *m, T *l, \
                                       T *acc, long nq, long nk, long d)            \
{                                                                                   \
    for (long i = 0; i < nq; ++i) {                                                 \
        T *row = s + i * nk;                                                        \
        T mx = -INFINITY;                                                           \
        if (mask) {                                                                 \
            const unsigned char *mr = mask + i * nk;                                \
            _Pragma("omp simd reduction(max:mx)")                                   \
            for (long j = 0; j < nk; ++j) {                                         \
                T x = mr[j] ? row[j] : (T)-INFINITY;                                \
                row[j] = x;                                                         \
                mx = x > mx ? x : mx;                                               \
            }                                                                       \
        } else {                                                                    \
            _Pragma("omp simd reduction(max:mx)")                                   \
            for (long j = 0; j < nk; ++j)                                           \
                mx = row[j] > mx ? row[j] : mx;                                     \
        }                                                                           \
        T m_new = m[i] > mx ? m[i] : mx;                                            \
        T ref = m_new == -INFINITY ? (T)0 : m_new;                                  \
        T alpha = EXP(m[i] - ref);                                                  \
        T total = 0;                                                                \
        _Pragma("omp simd reduction(+:total)")                                      \
        for (long j = 0; j < nk; ++j) {                                             \
            T p = EXP(row[j] - ref);                                                \
            row[j] = p;                                                             \
            total += p;                                                             \
        }                                                                           \
        l[i] = l[i] * alpha + total;                                                \
        if (alpha != (T)1) {                                                        \
            T *a = acc + i * d;                                                     \
            for (long j = 0; j < d; ++j)                                            \
                a[j] *= alpha;                                                      \
        }                                                                           \
        m[i] = m_new;                                                               \
    }                                                                               \
}                                                                                   \
                                                                                    \
static void fa_softmax_grad_##SUFFIX(T *s, const T *lse, T *dp, const T *delta,    \
                                     const T *dscore, long nq, long nk)             \
{                                                                                   \
    for (long i = 0; i < nq; ++i) {                                                 \
        T *row = s + i * nk, *drow = dp + i * nk;                                   \
        T ref = lse[i], di = delta[i];                                              \
        if (ref == -INFINITY) {                                                     \
            memset(row, 0, nk * sizeof(T));                                         \
            memset(drow, 0, nk * sizeof(T));                                        \
            continue;                                                               \
        }                                                                           \
        const T *g = dscore ? dscore + i * nk : 0;                                  \
        _Pragma("omp simd")                                                         \
        for (long j = 0; j < nk; ++j) {                                             \
            T p = EXP(row[j] - ref);                                                \
            T ds = p * (drow[j] - di);                                              \
            if (g) ds *= g[j];                                                      \
            row[j] = p;                                                             \
            drow[j] = p == (T)0 ? (T)0 : ds;                                        \
        }                                                                           \
    }                                                                               \
}

#ifdef __SSE2__
#define fa_softmax_update_f32 fa_softmax_update_sse
#define fa_softmax_grad_f32 fa_softmax_grad_sse
#define fa_softmax_update_f64 fa_softmax_update_sse_d
#define fa_softmax_grad_f64 fa_softmax_grad_sse_d
#else
FA_DEFINE_KERNELS(float, f32, fa_expf)
FA_DEFINE_KERNELS(double, f64, exp)
#endif

#endif
