# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled per-tile kernels; ``_kernels_py`` documents the semantics."""

from cython cimport floating

cdef extern from "_tile.h" nogil:
    void fa_softmax_update_f32(float *s, const unsigned char *mask, float *m, float *l,
                               float *acc, long nq, long nk, long d)
    void fa_softmax_update_f64(double *s, const unsigned char *mask, double *m, double *l,
                               double *acc, long nq, long nk, long d)
    void fa_softmax_grad_f32(float *s, const float *lse, float *dp, const float *delta,
                             const float *dscore, long nq, long nk)
    void fa_softmax_grad_f64(double *s, const double *lse, double *dp, const double *delta,
                             const double *dscore, long nq, long nk)

BACKEND = "cython"


def online_softmax_update(floating[:, ::1] s, const unsigned char[:, ::1] mask,
                          floating[::1] m, floating[::1] l, floating[:, ::1] acc):
    cdef long nq = s.shape[0], nk = s.shape[1], d = acc.shape[1]
    cdef const unsigned char *mp = NULL
    if nq == 0 or nk == 0:
        return
    if mask is not None:
        mp = &mask[0, 0]
    with nogil:
        if floating is float:
            fa_softmax_update_f32(&s[0, 0], mp, &m[0], &l[0], &acc[0, 0], nq, nk, d)
        else:
            fa_softmax_update_f64(&s[0, 0], mp, &m[0], &l[0], &acc[0, 0], nq, nk, d)


def softmax_grad(floating[:, ::1] s, const floating[::1] lse, floating[:, ::1] dp,
                 const floating[::1] delta, const floating[:, ::1] dscore):
    cdef long nq = s.shape[0], nk = s.shape[1]
    cdef const floating *gp = NULL
    if nq == 0 or nk == 0:
        return
    if dscore is not None:
        gp = &dscore[0, 0]
    with nogil:
        if floating is float:
            fa_softmax_grad_f32(&s[0, 0], &lse[0], &dp[0, 0], &delta[0], gp, nq, nk)
        else:
            fa_softmax_grad_f64(&s[0, 0], &lse[0], &dp[0, 0], &delta[0], gp, nq, nk)
