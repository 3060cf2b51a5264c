"""Independent reference implementations used to cross-check the package.

These deliberately avoid sharing code with the implementation under test:
labels come from explicit index-triple enumeration, not the greedy scan.
"""

import itertools

import numpy as np


def oracle_label(seq, ps) -> bool:
    """O(l^3) enumeration of all index triples."""
    l = len(seq)
    for p in ps.patterns:
        for i, j, k in itertools.combinations(range(l), 3):
            if seq[i] in p.s1 and seq[j] in p.s2 and seq[k] in p.s3:
                return True
    return False


def oracle_label_batch(s: np.ndarray, ps, n: int, chunk: int = 20000) -> np.ndarray:
    """Vectorized triple enumeration over a (rows, length) matrix."""
    s = np.asarray(s)
    rows, length = s.shape
    triples = np.array(list(itertools.combinations(range(length), 3)), dtype=np.int64)
    out = np.zeros(rows, dtype=bool)
    for p in ps.patterns:
        m = p.masks(n)
        h1, h2, h3 = m[0][s], m[1][s], m[2][s]
        for lo in range(0, len(triples), chunk):
            t = triples[lo : lo + chunk]
            out |= (h1[:, t[:, 0]] & h2[:, t[:, 1]] & h3[:, t[:, 2]]).any(axis=1)
            if out.all():
                return out
    return out
