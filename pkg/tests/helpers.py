import numpy as np


def rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    den = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)
