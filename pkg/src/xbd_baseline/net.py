"""Siamese ResNet-34 U-Net with a pointwise fusion head."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet34

from .ingest import ImagePair

log = logging.getLogger(__name__)

DOWNSAMPLING = 32
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class NetworkConfig:
    encoder: str = "resnet34"
    decoder_channels: int = 32  # D1, the per-branch feature depth
    out_channels: int = 5
    pretrained_encoder: bool = False
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.encoder != "resnet34":
            raise ValueError(f"unsupported encoder {self.encoder!r}")
        if self.out_channels != 5:
            raise ValueError("the model predicts exactly 5 channels")
        if self.decoder_channels < 1:
            raise ValueError("decoder_channels must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["mean"], d["std"] = tuple(d["mean"]), tuple(d["std"])
        return cls(**d)


class _ConvRelu(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True))


class _UpStage(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.up = _ConvRelu(cin, cout)
        self.merge = _ConvRelu(cout + cskip, cout) if cskip else None

    def forward(self, x, skip=None):
        x = self.up(F.interpolate(x, scale_factor=2, mode="nearest"))
        if self.merge is not None:
            x = self.merge(torch.cat([x, skip], 1))
        return x


class EncoderDecoder(nn.Module):
    """ResNet-34 encoder, five nearest-upsampling decoder stages with skips."""

    widths = (256, 128, 64, 48)

    def __init__(self, out_channels: int = 32, pretrained: bool = False):
        super().__init__()
        enc = resnet34()
        if pretrained:
            _load_imagenet(enc)
        self.stem = nn.Sequential(enc.conv1, enc.bn1, enc.relu)  # 1/2, 64
        self.pool = enc.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = enc.layer1, enc.layer2, enc.layer3, enc.layer4
        w = self.widths
        self.dec4 = _UpStage(512, 256, w[0])   # -> 1/16
        self.dec3 = _UpStage(w[0], 128, w[1])  # -> 1/8
        self.dec2 = _UpStage(w[1], 64, w[2])   # -> 1/4
        self.dec1 = _UpStage(w[2], 64, w[3])   # -> 1/2
        self.dec0 = _UpStage(w[3], 0, out_channels)  # -> 1/1

    def forward(self, x):
        s1 = self.stem(x)
        s2 = self.layer1(self.pool(s1))
        s3 = self.layer2(s2)
        s4 = self.layer3(s3)
        s5 = self.layer4(s4)
        d = self.dec4(s5, s4)
        d = self.dec3(d, s3)
        d = self.dec2(d, s2)
        d = self.dec1(d, s1)
        return self.dec0(d)


def _load_imagenet(enc: nn.Module) -> bool:
    from torchvision.models import ResNet34_Weights

    try:
        state = ResNet34_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
    except Exception as exc:  # offline, proxy failure, corrupt cache
        warnings.warn(f"ImageNet weights unavailable ({exc}); using random encoder init", RuntimeWarning)
        return False
    enc.load_state_dict(state)
    return True


class SiameseUNet(nn.Module):
    """Shared encoder-decoder on both images, then a 1x1 head on the concatenation."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.config = config
        d1 = config.decoder_channels
        self.branch = EncoderDecoder(d1, config.pretrained_encoder)
        self.head = nn.Conv2d(2 * d1, config.out_channels, kernel_size=1)

    def forward_single(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[-2:])
        return self.branch(x)

    def fuse(self, z_before: torch.Tensor, z_after: torch.Tensor) -> torch.Tensor:
        if z_before.shape != z_after.shape:
            raise ValueError(f"branch outputs differ: {tuple(z_before.shape)} vs {tuple(z_after.shape)}")
        if z_before.shape[1] != self.config.decoder_channels:
            raise ValueError(f"expected {self.config.decoder_channels} feature channels, got {z_before.shape[1]}")
        return self.head(torch.cat([z_before, z_after], 1))

    def forward(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, 5, H, W)`` for image batches ``(B, 3, H, W)``."""
        if pre.shape != post.shape:
            raise ValueError("pre and post batches must share a shape")
        # separate passes so batch-norm statistics stay per branch in training
        return self.fuse(self.forward_single(pre), self.forward_single(post))


def check_divisible(hw) -> None:
    h, w = int(hw[0]), int(hw[1])
    if h % DOWNSAMPLING or w % DOWNSAMPLING:
        raise ValueError(f"spatial size {h}x{w} must be a multiple of {DOWNSAMPLING}")


def preprocess(images: np.ndarray, config: NetworkConfig = NetworkConfig()) -> torch.Tensor:
    """uint8 ``(..., H, W, 3)`` rasters to normalized float ``(..., 3, H, W)``."""
    x = torch.from_numpy(np.ascontiguousarray(images)).float().div_(255.0)
    mean = torch.tensor(config.mean, dtype=torch.float32)
    std = torch.tensor(config.std, dtype=torch.float32)
    x = (x - mean) / std
    return x.movedim(-1, -3).contiguous()


@torch.no_grad()
def predict_probs(model: SiameseUNet, pair: ImagePair, device="cpu") -> np.ndarray:
    """Per-pixel sigmoid probabilities, ``H x W x 5``."""
    was_training = model.training
    model.eval()
    try:
        pre = preprocess(pair.pre[None], model.config).to(device)
        post = preprocess(pair.post[None], model.config).to(device)
        p = torch.sigmoid(model(pre, post).float())[0]
    finally:
        model.train(was_training)
    return p.permute(1, 2, 0).cpu().numpy()
