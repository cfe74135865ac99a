from __future__ import annotations

import numpy as np

_ROW_GAP = 4.0


def row_searchsorted(sorted_rows: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Per-row ``searchsorted(side='right')`` for 2-D arrays with values in [-1, 2].

    Rows are separated by a constant offset so a single flat search serves all
    of them.  Returns row-local insertion indices.
    """
    k, n = sorted_rows.shape
    off = _ROW_GAP * np.arange(k)[:, None]
    flat = (sorted_rows + off).ravel()
    idx = np.searchsorted(flat, (queries + off).ravel(), side="right")
    return idx.reshape(queries.shape) - n * np.arange(k)[:, None]


def prefix_sums(values: np.ndarray) -> np.ndarray:
    out = np.zeros(values.shape[:-1] + (values.shape[-1] + 1,))
    np.cumsum(values, axis=-1, out=out[..., 1:])
    return out


def hinge_sum(corners: np.ndarray, weights: np.ndarray, queries: np.ndarray,
              return_count: bool = False):
    """Row-wise ``sum_i w_i (a - c_i)^+`` for sorted corners ``c``.

    ``corners`` and ``weights`` have shape (K, n) with each row of corners
    nondecreasing; ``queries`` has shape (K, m).  With ``return_count`` the
    row-wise weight of corners strictly below each query (``sum_{c_i < a} w_i``,
    up to ties, where the hinge vanishes) is returned as well.
    """
    idx = row_searchsorted(corners, queries)
    cw = prefix_sums(weights)
    cwc = prefix_sums(weights * corners)
    s_w = np.take_along_axis(cw, idx, axis=1)
    s_wc = np.take_along_axis(cwc, idx, axis=1)
    val = queries * s_w - s_wc
    # ties and rounding can produce -0 or -1e-17; the exact value is >= 0
    np.maximum(val, 0.0, out=val)
    if return_count:
        return val, s_w
    return val
