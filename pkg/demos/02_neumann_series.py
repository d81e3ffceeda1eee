"""Correcting an imperfect inverse with the Neumann recursion.

A linear toy problem makes every quantity explicit: ``A`` is the forward
map and ``S = (I + E) A^-1`` an approximate inverse with ``||E|| = 0.5``.
The recursion should shrink the error by a factor 0.5 per term.

Run with ``python3 demos/02_neumann_series.py``.
"""
import numpy as np

from coupledfwi.inversion import abstract_neumann

rng = np.random.default_rng(1)
n = 30
A = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
S = (np.eye(n) + 0.5 * Q) @ np.linalg.inv(A)

m_true = rng.standard_normal(n)
out = abstract_neumann(lambda m: A @ m, lambda d: S @ d, A @ m_true, 25, m_true)
err = np.array(out["errors"])
for J in (1, 2, 5, 10, 20, 25):
    print(f"J={J:2d}  error {err[J - 1]:.3e}")
slope = np.polyfit(np.arange(5, 26), np.log(err[4:]), 1)[0]
print(f"fitted rate per term {np.exp(slope):.4f} (expected 0.5)")
