"""Regenerates the binary feature files of this fixture from the literals below."""
from pathlib import Path

import numpy as np

from hmsg.datasets import write_matrix

HERE = Path(__file__).parent

# P rows: classes 0,0,0,0, 1,1,1,1, 2,2,2,2
P = [
    [1.0, 0.1, 0.0, 0.3],
    [0.9, 0.0, 0.2, 0.1],
    [0.8, 0.2, 0.1, 0.0],
    [0.7, 0.3, 0.0, 0.2],
    [0.1, 1.0, 0.0, 0.2],
    [0.0, 0.9, 0.1, 0.4],
    [0.2, 0.8, 0.0, 0.1],
    [0.3, 0.7, 0.2, 0.0],
    [0.0, 0.1, 1.0, 0.3],
    [0.1, 0.0, 0.9, 0.2],
    [0.2, 0.1, 0.8, 0.0],
    [0.3, 0.0, 0.7, 0.1],
]
A = [
    [1.0, 0.0, 0.1],
    [0.8, 0.1, 0.0],
    [0.7, 0.3, 0.0],
    [0.1, 0.9, 0.0],
    [0.0, 1.0, 0.2],
    [0.2, 0.8, 0.1],
    [0.0, 0.1, 1.0],
    [0.1, 0.0, 0.9],
]

if __name__ == "__main__":
    write_matrix(HERE / "features.P.f64", np.array(P))
    write_matrix(HERE / "features.A.f64", np.array(A))
