"""Training loop, validation, checkpoints and prediction export."""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import cv2
import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from . import geoaug, ingest
from .ingest import DatasetSplit, ImagePair, PairRecord
from .locmask import compose_mask, localization_mask
from .losses import LossWeights, overall_loss, targets_from_labels, weights_from_frequencies
from .net import NetworkConfig, SiameseUNet, check_divisible, predict_probs, preprocess

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DATA_ROOT_ENV = "XBD_DATA_ROOT"


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_root: str = ""
    split_file: str = ""
    split_mode: str = "original"
    val_fraction: float = 0.1
    out_dir: str = "runs/baseline"

    lr0: float = 2e-4
    weight_decay: float = 1e-6
    halving_epochs: tuple = (5, 11, 17, 23, 29, 33)
    epochs: int = 40
    batch_size: int = 4
    accum_steps: int = 4
    max_steps: int = 0  # 0 = no limit
    checkpoint_every: int = 1  # epochs between checkpoint writes; 0 = only at the end
    precision: str = "full"
    seed: int = 0
    device: str = "auto"
    num_workers: int = 0

    gamma: float = 2.0
    w_focal: float = 1.0
    w_dice: float = 1.0
    clamp: float = 1e-7
    dice_eps: float = 1.0
    frequency_floor: bool = False
    freqs_file: str = ""

    decoder_channels: int = 32
    pretrained_encoder: bool = True

    augment: bool = True
    n_candidates: int = 10
    crop_min: int = 529
    crop_max: int = 715
    crop_out: int = 608

    loc_strategy: str = "channel"
    loc_threshold: float = 0.5

    def __post_init__(self):
        self.halving_epochs = tuple(sorted(int(h) for h in self.halving_epochs))
        if self.precision not in ("full", "half"):
            raise ConfigError(f"precision must be full or half, not {self.precision!r}")
        if self.split_mode not in ("original", "disjoint"):
            raise ConfigError(f"split_mode must be original or disjoint, not {self.split_mode!r}")
        if self.batch_size < 1 or self.accum_steps < 1 or self.epochs < 1:
            raise ConfigError("batch_size, accum_steps and epochs must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.crop_out % 32:
            raise ConfigError("crop_out must be a multiple of 32")

    @classmethod
    def reference_preset(cls, **overrides) -> "TrainConfig":
        """Reference settings: global batch 14 without accumulation."""
        return cls(**{"batch_size": 14, "accum_steps": 1, **overrides})

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a ``key = value`` file; ``#`` starts a comment.

        ``preset = reference`` starts from :meth:`reference_preset`. The data root
        environment variable overrides ``data_root``.
        """
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict = {}
        preset = None
        for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ConfigError(f"{path}:{n}: expected key = value")
            if key == "preset":
                preset = value
                continue
            if key not in types:
                raise ConfigError(f"{path}:{n}: unknown key {key!r}")
            values[key] = _convert(types[key], value, f"{path}:{n}")
        if os.environ.get(DATA_ROOT_ENV):
            values["data_root"] = os.environ[DATA_ROOT_ENV]
        if preset is None:
            return cls(**values)
        if preset != "reference":
            raise ConfigError(f"unknown preset {preset!r}")
        return cls.reference_preset(**values)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def loss_weights(self, w_class) -> LossWeights:
        return LossWeights(self.gamma, self.w_focal, self.w_dice, tuple(w_class), self.clamp, self.dice_eps)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(decoder_channels=self.decoder_channels, pretrained_encoder=self.pretrained_encoder)


def _convert(kind, value: str, where: str):
    kind = str(kind)
    try:
        if kind == "bool":
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {value!r} as {kind}") from exc
    return value


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    n = sum(1 for h in config.halving_epochs if h <= epoch)
    return config.lr0 * 2.0 ** -n


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def load_pair(root, rec: PairRecord) -> tuple[ImagePair, np.ndarray]:
    pre = read_image(rec.image_path(root, "pre"))
    post = read_image(rec.image_path(root, "post"))
    h, w = pre.shape[:2]
    label = ingest.load_label_raster(rec.label_path(root, "post"), size=(w, h))
    return ImagePair(pre, post, rec.tile_id, rec.event_name), label


class TileDataset(Dataset):
    """Training samples; augmentation randomness depends only on (seed, epoch, index)."""

    def __init__(self, records: Sequence, loader: Callable, config: TrainConfig, freqs, epoch: int = 0):
        self.records = list(records)
        self.loader = loader
        self.config = config
        self.freqs = freqs
        self.epoch = epoch

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        pair, label = self.loader(self.records[i])
        cfg = self.config
        if cfg.augment:
            rng = np.random.default_rng([cfg.seed, self.epoch, i])
            pair, label = geoaug.augment_sample(pair, label, self.freqs, rng, cfg.n_candidates,
                                                (cfg.crop_min, cfg.crop_max), cfg.crop_out)
        return (preprocess(pair.pre), preprocess(pair.post), torch.from_numpy(label.astype(np.int64)), i)


def _autocast(config: TrainConfig, device: torch.device):
    if config.precision != "half":
        return contextlib.nullcontext()
    dtype = torch.float16 if device.type == "cuda" else torch.bfloat16
    return torch.autocast(device.type, dtype=dtype)


def batch_loss(model, pre, post, labels, weights: LossWeights, breakdown=False):
    p = torch.sigmoid(model(pre, post).float())
    y, ignore = targets_from_labels(labels)
    return overall_loss(p, y, weights, ignore, breakdown=breakdown)


def accumulate_gradients(model, micro_batches: Sequence, weights: LossWeights, amp=None):
    """Backpropagate the mean loss over the union of ``micro_batches``.

    Each ``(pre, post, labels)`` micro-batch contributes its batch-mean loss
    scaled by its share of the images, so the summed gradient equals that of
    one batch holding all of them (for models without batch-coupled layers).
    Returns the combined loss and the list of per-micro-batch breakdowns.
    """
    total = sum(mb[0].shape[0] for mb in micro_batches)
    combined = 0.0
    parts = []
    for pre, post, labels in micro_batches:
        with amp or contextlib.nullcontext():
            bd = batch_loss(model, pre, post, labels, weights, breakdown=True)
        share = pre.shape[0] / total
        (bd.total * share).backward()
        combined += float(bd.total.detach()) * share
        parts.append(bd)
    return combined, parts


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointMeta:
    epoch: int
    best_val_loss: float
    config_hash: str
    rng_state: list = field(default_factory=list, repr=False)
    step: int = 0


def save_checkpoint(path, model: SiameseUNet, meta: CheckpointMeta, config: TrainConfig | None = None,
                    optimizer=None, state_dict: dict | None = None) -> None:
    """Write atomically; ``state_dict`` overrides the model's current weights."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": model.config.to_dict(),
        "state_dict": model.state_dict() if state_dict is None else state_dict,
        "meta": dataclasses.asdict(meta),
        "train_config": config.to_text() if config is not None else "",
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, network_config: NetworkConfig | None = None, device="cpu"):
    """Return ``(model, meta, payload)``; refuses a checkpoint built for another network."""
    payload = torch.load(path, map_location=device, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version}")
    stored = NetworkConfig.from_dict(payload["network_config"])
    if network_config is not None and _arch(network_config) != _arch(stored):
        raise ValueError(f"{path}: checkpoint network {stored} does not match requested {network_config}")
    # weights come from the checkpoint; never fetch pretrained ones here
    model = SiameseUNet(dataclasses.replace(stored, pretrained_encoder=False))
    model.config = stored
    model.load_state_dict(payload["state_dict"])
    model.to(device).eval()
    return model, CheckpointMeta(**payload["meta"]), payload


def _arch(cfg: NetworkConfig):
    return (cfg.encoder, cfg.decoder_channels, cfg.out_channels, tuple(cfg.mean), tuple(cfg.std))


# ---------------------------------------------------------------------------
# validation and training
# ---------------------------------------------------------------------------

@torch.no_grad()
def validate(model, samples: Iterable[tuple[ImagePair, np.ndarray]], weights: LossWeights, device="cpu") -> float:
    """Mean overall loss over full, uncropped validation pairs, in the given order."""
    was_training = model.training
    model.eval()
    losses = []
    try:
        for pair, label in samples:
            check_divisible(pair.shape)
            pre = preprocess(pair.pre[None], model.config).to(device)
            post = preprocess(pair.post[None], model.config).to(device)
            lab = torch.from_numpy(label[None].astype(np.int64)).to(device)
            losses.append(float(batch_loss(model, pre, post, lab, weights)))
    finally:
        model.train(was_training)
    if not losses:
        raise ValueError("validation set is empty")
    return math.fsum(losses) / len(losses)


@dataclass
class TrainResult:
    meta: CheckpointMeta
    model: SiameseUNet
    step_losses: list
    epoch_losses: list
    val_losses: list
    weights: LossWeights
    out_dir: Path


def resolve_split(config: TrainConfig, data_root) -> DatasetSplit:
    if config.split_file:
        split = ingest.read_split(config.split_file)
    else:
        pairs = ingest.discover_pairs(data_root)
        if config.split_mode == "original":
            split = ingest.make_original_split(pairs)
        else:
            split = ingest.make_disjoint_split(ingest.events_from_pairs(pairs), pairs)
    if not split.pairs.get("val"):
        split = ingest.with_validation(split, config.val_fraction, config.seed)
    return split


def training_frequencies(config: TrainConfig, labels: Iterable[np.ndarray]) -> np.ndarray:
    if config.freqs_file:
        return ingest.load_frequencies(config.freqs_file)
    return ingest.compute_class_frequencies(labels, floor=config.frequency_floor)


def _warn_small_batch(config: TrainConfig, weights: LossWeights) -> None:
    weighted = len(set(weights.w_class)) > 1
    if config.batch_size == 1 and weighted:
        warnings.warn(
            "batch_size 1 with class-weighted loss: rare classes make single-image losses "
            "unstable; prefer a larger batch or gradient accumulation",
            RuntimeWarning,
            stacklevel=3,
        )


def train(config: TrainConfig, split: DatasetSplit | None = None, data_root=None,
          loader: Callable | None = None) -> TrainResult:
    """Train a model and write ``last.pt`` / ``best.pt`` plus a metrics log to ``out_dir``.

    ``loader`` maps a pair record to ``(ImagePair, label)``; by default tiles
    are read from ``data_root`` in the xBD layout. The best checkpoint is
    chosen by validation loss, or by epoch training loss when the split has
    no validation pairs.
    """
    data_root = data_root or config.data_root
    if loader is None:
        if not data_root or not Path(data_root).is_dir():
            raise FileNotFoundError(f"data root {data_root!r} does not exist")
        loader = lambda rec: load_pair(data_root, rec)  # noqa: E731
    if split is None:
        split = resolve_split(config, data_root)
    train_recs = split.pairs.get("train", [])
    val_recs = sorted(split.pairs.get("val", []), key=lambda r: r.tile_id)
    if not train_recs:
        raise ValueError("split has no training pairs")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text())

    freqs = training_frequencies(config, (loader(r)[1] for r in train_recs))
    ingest.save_frequencies(out_dir / "class_frequencies.txt", freqs)
    weights = config.loss_weights(weights_from_frequencies(freqs))
    _warn_small_batch(config, weights)

    torch.manual_seed(config.seed)
    device = resolve_device(config.device)
    model = SiameseUNet(config.network_config()).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr0, weight_decay=config.weight_decay)
    amp = _autocast(config, device)

    dataset = TileDataset(train_recs, loader, config, freqs)
    metrics_log = open(out_dir / "metrics.log", "w")
    metrics_log.write("epoch lr train_loss val_loss\n")

    step_losses, epoch_losses, val_losses = [], [], []
    best = math.inf
    best_state = None  # (weights, meta) not yet written to best.pt
    step = 0
    meta = CheckpointMeta(0, math.inf, config.hash())
    try:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            dataset.epoch = epoch
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset)).tolist()
            batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
            data = DataLoader(dataset, batch_sampler=batches, num_workers=config.num_workers)
            model.train()
            pending, epoch_total, epoch_n = [], 0.0, 0
            for n_batch, (pre, post, labels, idx) in enumerate(data):
                pending.append((pre.to(device), post.to(device), labels.to(device), idx))
                if len(pending) < config.accum_steps and n_batch < len(batches) - 1:
                    continue
                optimizer.zero_grad(set_to_none=True)
                loss, parts = accumulate_gradients(model, [p[:3] for p in pending], weights, amp)
                if not math.isfinite(loss):
                    ids = [train_recs[i].tile_id for p in pending for i in p[3].tolist()]
                    comps = [bd.as_dict() for bd in parts]
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}; "
                                                f"tiles {ids}; components {comps}")
                optimizer.step()
                step += 1
                step_losses.append(loss)
                epoch_total += loss
                epoch_n += 1
                pending = []
                if config.max_steps and step >= config.max_steps:
                    break
            train_loss = epoch_total / max(epoch_n, 1)
            epoch_losses.append(train_loss)

            if val_recs:
                val = validate(model, (loader(r) for r in val_recs), weights, device)
            else:
                val = train_loss
            val_losses.append(val)
            metrics_log.write(f"{epoch} {lr:.6g} {train_loss:.6f} {val:.6f}\n")
            metrics_log.flush()
            log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, train_loss, val)

            if val < best:
                best = val
                best_state = ({k: v.detach().clone() for k, v in model.state_dict().items()},
                              CheckpointMeta(epoch, best, config.hash(), torch.get_rng_state().tolist(), step))
            meta = CheckpointMeta(epoch, best, config.hash(), torch.get_rng_state().tolist(), step)
            done = epoch == config.epochs - 1 or bool(config.max_steps and step >= config.max_steps)
            every = config.checkpoint_every
            if done or (every and (epoch + 1) % every == 0):
                if best_state is not None:
                    # best.pt carries weights only; resume from last.pt
                    best_weights, best_meta = best_state
                    save_checkpoint(out_dir / "best.pt", model, best_meta, config, state_dict=best_weights)
                    best_state = None
                save_checkpoint(out_dir / "last.pt", model, meta, config, optimizer)
            if done:
                break
    finally:
        metrics_log.close()
    return TrainResult(meta, model, step_losses, epoch_losses, val_losses, weights, out_dir)


# ---------------------------------------------------------------------------
# prediction export
# ---------------------------------------------------------------------------

def predict_masks(model, pair: ImagePair, loc_strategy="channel", threshold=0.5, external=None, device="cpu"):
    P = predict_probs(model, pair, device)
    L = localization_mask(P, loc_strategy, threshold, external)
    return L, compose_mask(P, L)


def write_mask(path, mask: np.ndarray) -> None:
    if not cv2.imwrite(str(path), np.ascontiguousarray(mask, dtype=np.uint8)):
        raise OSError(f"could not write {path}")


def read_mask(path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if m is None:
        raise FileNotFoundError(f"cannot read mask {path}")
    return m


def predict_to_files(model, pairs: Iterable[ImagePair], out_dir, loc_strategy="channel", threshold=0.5,
                     external_masks: dict | None = None, device="cpu") -> list[Path]:
    """Write ``<tile>_localization.png`` (0/1) and ``<tile>_damage.png`` (0..4) per tile."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")
    written = []
    for pair in pairs:
        ext = external_masks.get(pair.tile_id) if external_masks else None
        L, M = predict_masks(model, pair, loc_strategy, threshold, ext, device)
        for suffix, mask in (("localization", L), ("damage", M)):
            path = out_dir / f"{pair.tile_id}_{suffix}.png"
            write_mask(path, mask)
            written.append(path)
    return written
