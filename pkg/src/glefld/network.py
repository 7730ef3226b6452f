"""Feature extractor -> GLE stack -> upsampling decoder -> 1x1 heatmap head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .gle import GLEStack
from .nn import Conv2d, ConvBNReLU, ConvReLU, MaxPool, Module, Sequential, UpBlock, init_weights_keyed
from .tensor import ShapeError, Tensor

NUM_LANDMARKS = 8
DOWNSAMPLE_STAGES = 3
VGG_WIDTHS = (64, 128, 256, 512)
# VGG-16 convs per block up to conv4_3
VGG_BLOCK_DEPTHS = (2, 2, 3, 3)


class ConfigError(ValueError):
    """Raised when a NetworkConfig violates one of its constraints."""


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 224
    backbone: str = "toy"
    width: float = 1.0
    k: int = 2
    num_landmarks: int = NUM_LANDMARKS
    decoder_stages: int = DOWNSAMPLE_STAGES

    def validate(self) -> None:
        if self.backbone not in ("toy", "paper_vgg"):
            raise ConfigError(f"backbone must be 'toy' or 'paper_vgg', got {self.backbone!r}")
        if self.input_size < 8 or self.input_size % (2 ** DOWNSAMPLE_STAGES):
            raise ConfigError(f"input_size must be a positive multiple of {2 ** DOWNSAMPLE_STAGES}, "
                              f"got {self.input_size}")
        if self.decoder_stages != DOWNSAMPLE_STAGES:
            raise ConfigError(f"decoder_stages must be {DOWNSAMPLE_STAGES} so the decoder output "
                              f"matches input_size, got {self.decoder_stages}")
        if self.num_landmarks != NUM_LANDMARKS:
            raise ConfigError(f"num_landmarks is fixed at {NUM_LANDMARKS}, got {self.num_landmarks}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if not self.width > 0:
            raise ConfigError(f"width multiplier must be positive, got {self.width}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def widths(self) -> tuple:
        # Even widths: the non-local block halves its channel count.
        return tuple(max(2, 2 * int(round(c * self.width / 2))) for c in VGG_WIDTHS)

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** DOWNSAMPLE_STAGES


class LandmarkNet(Module):
    def __init__(self, config: NetworkConfig):
        config.validate()
        self.config = config
        w1, w2, w3, w4 = config.widths()
        if config.backbone == "paper_vgg":
            layers, cin = [], 3
            for block, (width, depth) in enumerate(zip((w1, w2, w3, w4), VGG_BLOCK_DEPTHS)):
                for _ in range(depth):
                    layers.append(ConvReLU(cin, width))
                    cin = width
                if block < DOWNSAMPLE_STAGES:
                    layers.append(MaxPool())
        else:
            layers = [ConvBNReLU(3, w1), MaxPool(),
                      ConvBNReLU(w1, w2), MaxPool(),
                      ConvBNReLU(w2, w3), MaxPool(),
                      ConvBNReLU(w3, w4)]
        self.backbone = Sequential(layers)
        self.gle = GLEStack(w4, config.k)
        chans = [w4 // 2 ** i for i in range(config.decoder_stages + 1)]
        chans = [max(2, c) for c in chans]
        self.decoder = [UpBlock(a, b) for a, b in zip(chans[:-1], chans[1:])]
        self.head = Conv2d(chans[-1], config.num_landmarks, 1)

    def features(self, images: Tensor) -> Tensor:
        return self.backbone(images)

    def forward(self, images: Tensor) -> Tensor:
        x = self.gle(self.backbone(images))
        for stage in self.decoder:
            x = stage(x)
        return self.head(x)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_tensors(self) -> dict:
        """Parameters and batch-norm buffers by dotted name."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, stats, attr in self.named_buffers():
            out[name] = getattr(stats, attr)
        return out

    def load_state_tensors(self, tensors: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (stats, attr) for name, stats, attr in self.named_buffers()}
        expected = set(params) | set(buffers)
        if strict and set(tensors) != expected:
            missing = sorted(expected - set(tensors))
            extra = sorted(set(tensors) - expected)
            raise ShapeError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in tensors.items():
            if name in params:
                target = params[name]
                if target.shape != arr.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != network shape {target.shape}")
                target.data = np.array(arr, dtype=np.float64)
                target.zero_grad()
            elif name in buffers:
                stats, attr = buffers[name]
                if getattr(stats, attr).shape != arr.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != buffer shape "
                                     f"{getattr(stats, attr).shape}")
                setattr(stats, attr, np.array(arr, dtype=np.float64))


def _check_resolution(config: NetworkConfig) -> None:
    s = config.input_size
    for _ in range(DOWNSAMPLE_STAGES):
        s //= 2
    if s * 2 ** DOWNSAMPLE_STAGES != config.input_size:
        raise ConfigError(f"input_size {config.input_size} does not survive {DOWNSAMPLE_STAGES} 2x pools")
    for _ in range(config.decoder_stages):
        s = (s - 1) * 2 - 2 * 1 + 4
    if s != config.input_size:
        raise ConfigError(f"decoder output {s} != input_size {config.input_size}")


def build_network(config: NetworkConfig, seed: int) -> LandmarkNet:
    """Construct and deterministically initialise a LandmarkNet.

    Conv weights are He-uniform, each from a stream keyed by the seed and
    the parameter name; biases start at zero and every non-local output
    projection is zeroed so each GLE module starts as an identity residual.

    The 1x1 heatmap head also starts at zero. With He-scaled head weights
    the initial outputs have unit variance, hundreds of times the energy of
    the Gaussian targets, and the quickest way to cut that loss is to
    flatten every upstream feature map; training then stalls at the
    all-zero predictor. A zero head starts at that predictor instead and
    the first gradients go straight into building peaks.
    """
    config.validate()
    _check_resolution(config)
    net = LandmarkNet(config)
    net.assign_names()
    init_weights_keyed(net, seed)
    for module in net.gle.modules:
        module.non_local.zero_projection()
    net.head.weight.data = np.zeros_like(net.head.weight.data)
    return net


def forward(net: LandmarkNet, images: Tensor, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    s = net.config.input_size
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"forward: images must be [N,3,{s},{s}], got shape {images.shape}")
    if images.shape[2] != s or images.shape[3] != s:
        raise ShapeError(f"forward: spatial size {images.shape[2]}x{images.shape[3]} != input_size {s}")
    net.train(mode == "train")
    return net(images)


def import_weights(net: LandmarkNet, path) -> None:
    """Load a named-tensor weight file (see :mod:`glefld.serialization`)."""
    from .serialization import read_weights
    net.load_state_tensors(read_weights(path), strict=True)


def export_weights(net: LandmarkNet, path) -> None:
    from .serialization import write_weights
    write_weights(path, net.state_tensors())


__all__ = ["NetworkConfig", "LandmarkNet", "ConfigError", "build_network", "forward",
           "import_weights", "export_weights"]
