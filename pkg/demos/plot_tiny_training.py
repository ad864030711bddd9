"""
A tiny training run
===================

Train the siamese network for a few steps on synthetic tiles, export masks
and score them. Real runs use the same calls with ``XBD_DATA_ROOT``.
"""

import tempfile
from pathlib import Path

from xbd_baseline import ingest, metrics, synthetic, training

work = Path(tempfile.mkdtemp())
root = work / "xbd"
recs = synthetic.write_dataset(root, n_tiles=3, size=128, per_class=2)
split = ingest.DatasetSplit("original", ["synthetic"], [], [], {"train": recs[:2], "val": recs[2:]})

config = training.TrainConfig(out_dir=str(work / "run"), pretrained_encoder=False, decoder_channels=16,
                              augment=False, batch_size=2, accum_steps=1, lr0=1e-3, epochs=5,
                              halving_epochs=(3,))
result = training.train(config, split, root)
print("lr per epoch:", [training.lr_at_epoch(config, e) for e in range(config.epochs)])
print("train losses:", [round(v, 3) for v in result.epoch_losses])
print("val losses:  ", [round(v, 3) for v in result.val_losses])

model, meta, _ = training.load_checkpoint(result.out_dir / "best.pt")
print("best epoch", meta.epoch)
pairs = [training.load_pair(root, r) for r in recs]
training.predict_to_files(model, [p for p, _ in pairs], work / "pred")
report = metrics.evaluate_dataset(
    ((p.tile_id, training.read_mask(work / "pred" / f"{p.tile_id}_damage.png")) for p, _ in pairs),
    ((p.tile_id, lab) for p, lab in pairs))
print(report.text())
