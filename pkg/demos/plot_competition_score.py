"""
Scoring damage masks
====================

The score pools pixel counts over every tile before computing F1, then
blends localization and damage quality as ``0.3 * F1_loc + 0.7 * F1_dmg``.
"""

import numpy as np

from xbd_baseline import metrics
from xbd_baseline.ingest import IGNORE

# A toy label: one house per damage class, one pixel left unclassified.
label = np.zeros((8, 8), np.uint8)
label[1:3, 1:3] = 1
label[1:3, 5:7] = 2
label[5:7, 1:3] = 3
label[5:7, 5:7] = 4
label[0, 7] = IGNORE

# A prediction that finds every house but calls half the destroyed one "major".
pred = label.copy()
pred[5:7, 5] = 3
pred[0, 7] = 0

report = metrics.evaluate_dataset([("tile", pred)], [("tile", label)])
print(report.text())

# Damage F1 is a harmonic mean, so a single class with F1 = 0 zeroes it.
print("harmonic mean of (0.9, 0.8, 0.7, 0.0):", metrics.harmonic_mean([0.9, 0.8, 0.7, 0.0]))

# Damage is only judged on ground-truth buildings, so a false building on
# background hurts localization alone.
pred2 = pred.copy()
pred2[0, 0] = 2
c = metrics.accumulate(pred2, label)
print("localization fp:", c.fp_loc, " damage fp per class:", c.fp.tolist())
