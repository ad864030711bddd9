"""Siamese U-Net baseline for building damage assessment on xBD image pairs.

Modules
-------
ingest     xBD labels, rasterization, class frequencies, dataset splits
geoaug     paired geometric augmentation and class-biased cropping
net        shared-weight encoder-decoder with a 1x1 fusion head
losses     focal, soft dice, combo and inverse-frequency weighted losses
locmask    localization masks (threshold, Otsu, external) and mask composition
metrics    pixel F1 scores and the xView2 competition score
training   training loop, validation, checkpoints, prediction export
cli        command-line interface
"""

from .ingest import IGNORE, DatasetSplit, EventRecord, ImagePair, PairRecord
from .metrics import ScoreReport, competition_score, evaluate_dataset, harmonic_mean

__version__ = "0.1.0"
