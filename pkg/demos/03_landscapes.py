"""Misfit landscapes: data misfit against model-space misfit.

A perfect inverse is built by memoising the forward map, so the model-space
objective becomes an exact quadratic in the scan coefficient while the data
misfit is not.

Run with ``python3 demos/03_landscapes.py``.
"""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from mocks import MemoForward, PerfectInverse, make_forward  # noqa: E402

from coupledfwi import analysis as an  # noqa: E402
from coupledfwi.wave import GridSpec  # noqa: E402

grid = GridSpec(cells_per_side=16, dt=0.002, t_final=0.3, record_stride=5)
fwd = MemoForward(make_forward(grid))
base = np.full(grid.shape, 10.0)
spec = an.ScanSpec((2, 1), -1.0, 1.0, 21)
truth_h = 0.4
c = np.zeros((3, 3))
c[2, 1] = truth_h
from coupledfwi import velocity as vel  # noqa: E402

g = fwd(base + vel.eval_fourier(vel.FourierCoeffs(c), grid))
psi = an.line_scan("psi", g, base, spec, None, fwd)
phi = an.line_scan("phi", g, base, spec, PerfectInverse(fwd), fwd)
print("     h        psi          phi")
for (h, p), (_, q) in zip(psi, phi):
    print(f"{h:6.2f}  {p:11.4e}  {q:11.4e}")
print(f"local minima: psi {an.local_minima_count(psi[:, 1])}, phi {an.local_minima_count(phi[:, 1])}")
