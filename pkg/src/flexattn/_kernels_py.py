"""Pure numpy tile kernels, used when the compiled extension is unavailable.

Both functions work in place on C-contiguous arrays of a single float dtype.
"""

import numpy as np

BACKEND = "python"


def online_softmax_update(s, mask, m, l, acc):
    """Fold one score tile into the running softmax state of its rows.

    On return ``s`` holds ``exp(s - m_new)`` (the unnormalised probabilities
    the caller multiplies into V), ``acc`` and ``l`` are rescaled to the new
    running max and ``l`` includes this tile's row sums.
    """
    if mask is not None:
        np.copyto(s, -np.inf, where=~mask.view(bool))
    m_new = np.maximum(m, s.max(axis=1))
    ref = np.where(np.isneginf(m_new), 0, m_new).astype(s.dtype, copy=False)
    alpha = np.exp(m - ref)
    np.subtract(s, ref[:, None], out=s)
    np.exp(s, out=s)
    l *= alpha
    l += s.sum(axis=1)
    acc *= alpha[:, None]
    m[:] = m_new


def softmax_grad(s, lse, dp, delta, dscore):
    """Turn a recomputed score tile into probabilities and dp into dscore.

    ``s <- exp(s - lse)``; ``dp <- s * (dp - delta) * dscore`` with rows whose
    lse is -inf (fully masked) and zero-probability entries forced to 0.
    """
    ref = np.where(np.isneginf(lse), np.inf, lse).astype(s.dtype, copy=False)
    np.subtract(s, ref[:, None], out=s)
    np.exp(s, out=s)
    dp -= delta[:, None]
    dp *= s
    if dscore is not None:
        dp *= dscore
    np.copyto(dp, 0, where=(s == 0))
