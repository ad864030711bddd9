"""
Losses and the final mask
=========================

Each of the five output channels is a separate binary problem with a focal
and a soft dice term. At inference a localization mask gates the argmax of
the four damage channels.
"""

import numpy as np
import torch

from xbd_baseline import locmask, losses

# Focal loss shrinks the penalty on pixels that are already easy.
p = torch.tensor([[0.5, 0.9, 0.99]], dtype=torch.float64)
for g in (0.0, 2.0):
    vals = [float(losses.focal_loss(p[:, i:i + 1], torch.ones(1, 1, dtype=torch.float64), g)) for i in range(3)]
    print(f"gamma {g}: " + ", ".join(f"{v:.4f}" for v in vals))

# Inverse-frequency class weights.
freqs = [0.12, 0.02, 0.015, 0.01, 0.165]
print("class weights:", np.round(losses.weights_from_frequencies(freqs), 1))

# A probability map with one confident building and one faint one.
P = np.zeros((8, 8, 5))
P[1:4, 1:4, 4] = 0.9
P[1:4, 1:4, 2] = 0.8
P[5:7, 5:7, 4] = 0.3
P[5:7, 5:7, 0] = 0.4
P[5:7, 5:7, 3] = 0.35

for strategy in ("channel", "otsu"):
    L = locmask.localization_mask(P, strategy)
    M = locmask.compose_mask(P, L)
    print(strategy)
    print(M)
