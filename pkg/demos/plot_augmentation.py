"""
Geometric augmentation and rare-class crops
===========================================

Pre and post images always receive the same warp. The crop is the best of a
few random windows, scored by inverse class frequency, so rare damage
classes show up in training batches more often.
"""

import numpy as np

from xbd_baseline import geoaug, synthetic

rng = np.random.default_rng(0)
pair, label, _ = synthetic.render_tile(rng, size=1024, per_class=6)
freqs = np.array([(label == c).mean() for c in (1, 2, 3, 4)] + [(label > 0).mean()])
print("class frequencies:", np.round(freqs, 4))

t = geoaug.sample_transform(rng)
print("sampled transform:", t)
warped, wlabel = geoaug.apply_transform(pair, label, t)

# Crops from 1 candidate versus 10: count destroyed pixels in the window.
for n in (1, 10):
    hits = []
    for seed in range(50):
        spec = geoaug.sample_crop(wlabel, freqs, np.random.default_rng(seed), n_candidates=n)
        win = wlabel[spec.y0:spec.y0 + spec.side, spec.x0:spec.x0 + spec.side]
        hits.append((win == 4).sum())
    print(f"{n:>2} candidates: mean destroyed pixels per crop {np.mean(hits):.0f}")

out, out_label = geoaug.augment_sample(pair, label, freqs, np.random.default_rng(1))
print("network input:", out.pre.shape, out_label.shape)
