"""Why the heading term of the training loss compares sines and cosines.

Two headings a hair apart across the 0 / 2*pi seam look almost a full turn
apart to a raw angle difference.
"""
import math

import numpy as np

from beaconloc import loss_l, wmse

true = np.array([[4.0, 4.0, 0.01]])
for gap in (0.02, 0.5, 1.0, math.pi):
    pred = np.array([[4.0, 4.0, (0.01 - gap) % (2 * math.pi)]])
    print(f"angular gap {gap:5.2f}:  wMSE {wmse(pred, true):8.4f}   L {loss_l(pred, true):8.5f}")

# L is blind to whole turns; wMSE is not
pred = np.array([[4.0, 4.0, 0.3]])
spun = pred + [0.0, 0.0, 2 * math.pi]
print(f"\nadd 2*pi:  wMSE {wmse(pred, true):.4f} -> {wmse(spun, true):.4f}"
      f"   L {loss_l(pred, true):.5f} -> {loss_l(spun, true):.5f}")
