from __future__ import annotations

import numpy as np


def competition_rank(values, descending: bool = True) -> np.ndarray:
    """1-based ranks where tied values share the lowest rank of their group ("1224")."""
    v = np.asarray(values, dtype=float)
    if descending:
        v = -v
    # rank = 1 + number of strictly better values
    s = np.sort(v)
    return np.searchsorted(s, v, side="left") + 1
