"""Independent oracles the test suite checks production code against.

Everything here is deliberately naive: central finite differences for
gradients, per-pair gathers for energy layouts, exhaustive alignment
enumeration for edit distance. None of it shares code with the paths
it verifies.
"""

from itertools import combinations

import numpy as np


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. each parameter.

    ``loss_fn`` must recompute the forward pass from the parameters'
    current ``data`` arrays; entries are perturbed in place.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn()
            flat[i] = orig - h
            minus = loss_fn()
            flat[i] = orig
            gf[i] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / (|a| + |n| + 1e-12), elementwise."""
    return float(np.max(np.abs(analytic - numeric)
                        / (np.abs(analytic) + np.abs(numeric) + 1e-12)))


def gather_shift_oracle(b: np.ndarray) -> np.ndarray:
    """Per-entry gather for the distance re-indexing: explicit loops."""
    heads, k, width = b.shape
    assert width == 2 * k - 1
    out = np.empty((heads, k, k))
    for h in range(heads):
        for i in range(k):
            for j in range(k):
                out[h, i, j] = b[h, i, (k - 1) - (i - j)]
    return out


def alignment_edit_distance(ref, hyp) -> int:
    """Minimum edit cost by enumerating every monotone alignment.

    An alignment pairs up equally many positions of ref and hyp in
    increasing order; its cost is one per unpaired position plus one
    per mismatched pair. The minimum over all alignments equals the
    substitution/insertion/deletion edit distance.
    """
    m, n = len(ref), len(hyp)
    best = m + n  # empty alignment: delete everything, insert everything
    for k in range(1, min(m, n) + 1):
        for ri in combinations(range(m), k):
            for hi in combinations(range(n), k):
                mismatches = sum(ref[a] != hyp[b] for a, b in zip(ri, hi))
                best = min(best, (m - k) + (n - k) + mismatches)
    return best


def all_sequences(alphabet, max_len: int, min_len: int = 0):
    """Every sequence over ``alphabet`` with length in [min_len, max_len]."""
    seqs = []
    frontier = [()]
    for length in range(max_len + 1):
        if length >= min_len:
            seqs.extend(frontier)
        frontier = [s + (a,) for s in frontier for a in alphabet]
    return seqs
