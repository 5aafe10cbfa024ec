"""Hand-enumerated 3-node system (nodes 1-2-3, two pipes of two segments each).

Computation nodes: pipe P1 holds 0, 1, 2 and pipe P2 holds 3, 4, 5; node 1
ties to 0, node 2 to 2 and 3, node 3 to 5. State columns are pi_i = 2i and
f_i = 2i + 1; columns 12, 13, 14 are the node pressures of nodes 1, 2, 3.
Each entry below was written out from the mass and momentum equations
``pi_i + a (f_i - f_{i-1}) = pi_i'`` and ``b f_i + c pi_i + d pi_{i-1} = f_i'``,
the pressure ties ``pi_i - pi_node = 0``, the pressure pin at node 1 and the
mass balances ``sum out - sum in = injection`` at nodes 2 and 3.
"""
import numpy as np

# (row, col, symbol); symbol is a number or "<sign><coef><pipe>"
ENTRIES = [
    # P1, i = 1: mass row 0, momentum row 1
    (0, 2, 1.0), (0, 3, "+a1"), (0, 1, "-a1"),
    (1, 3, "+b1"), (1, 2, "+c1"), (1, 0, "+d1"),
    # P1, i = 2
    (2, 4, 1.0), (2, 5, "+a1"), (2, 3, "-a1"),
    (3, 5, "+b1"), (3, 4, "+c1"), (3, 2, "+d1"),
    # P2, i = 4
    (4, 8, 1.0), (4, 9, "+a2"), (4, 7, "-a2"),
    (5, 9, "+b2"), (5, 8, "+c2"), (5, 6, "+d2"),
    # P2, i = 5
    (6, 10, 1.0), (6, 11, "+a2"), (6, 9, "-a2"),
    (7, 11, "+b2"), (7, 10, "+c2"), (7, 8, "+d2"),
    # pressure ties
    (8, 0, 1.0), (8, 12, -1.0),
    (9, 4, 1.0), (9, 13, -1.0),
    (10, 6, 1.0), (10, 13, -1.0),
    (11, 10, 1.0), (11, 14, -1.0),
    # node 1 pressure pin, node 2 and node 3 balances
    (12, 12, 1.0),
    (13, 7, 1.0), (13, 5, -1.0),
    (14, 11, -1.0),
]

S_ONES = [(0, 2), (1, 3), (2, 4), (3, 5), (4, 8), (5, 9), (6, 10), (7, 11)]
H_ENTRIES = [(0, 1, 1.0), (1, 4, 1.0), (2, 10, 1.0)]


def golden_K(theta) -> np.ndarray:
    a1, b1, c1, d1, a2, b2, c2, d2 = np.asarray(theta, dtype=float)
    sym = {"a1": a1, "b1": b1, "c1": c1, "d1": d1, "a2": a2, "b2": b2, "c2": c2, "d2": d2}
    K = np.zeros((15, 15))
    for r, c, s in ENTRIES:
        if isinstance(s, str):
            v = sym[s[1:]] * (1.0 if s[0] == "+" else -1.0)
        else:
            v = s
        K[r, c] += v
    return K


def golden_S() -> np.ndarray:
    S = np.zeros((8, 12))
    for r, c in S_ONES:
        S[r, c] = 1.0
    return S


def golden_H() -> np.ndarray:
    H = np.zeros((3, 12))
    for r, c, v in H_ENTRIES:
        H[r, c] = v
    return H
