"""Re-ID feature path: crop ground-truth boxes out of scenes and encode the
crops into unit-norm embeddings with a small convolutional encoder.

Nothing here looks at detection scores or regression targets; the feature
path depends only on pixels and boxes.

Parameter vectors are flat float64 arrays holding the encoder parameters in
``named_parameters`` order: ``convs.0.weight, convs.0.bias, ...,
proj.weight, proj.bias``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def clip(self, height: float, width: float) -> "Box":
        """Clip to ``[0, width] x [0, height]``; raises if nothing is left."""
        return Box(max(0.0, self.x1), max(0.0, self.y1),
                   min(float(width), self.x2), min(float(height), self.y2))


@dataclass
class Annotation:
    box: Box
    identity: Optional[int] = None


@dataclass
class SceneImage:
    scene_id: int
    pixels: np.ndarray  # H x W x C in [0, 1]
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        ids = [a.identity for a in self.annotations if a.identity is not None]
        if len(ids) != len(set(ids)):
            raise ValueError(f"scene {self.scene_id} contains an identity more than once")

    @property
    def shape(self):
        return self.pixels.shape


def _sample_axis(start: float, length: float, n_out: int, n_in: int):
    # Pixel-centre sampling (align_corners=False), clamped at the borders.
    pos = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def roi_extract(image, box: Box, roi_size) -> np.ndarray:
    """Bilinear resample of the box region to ``roi_size = (h, w)``."""
    pixels = image.pixels if isinstance(image, SceneImage) else np.asarray(image, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    H, W = pixels.shape[:2]
    box = box.clip(H, W)
    h, w = int(roi_size[0]), int(roi_size[1])
    if h < 1 or w < 1:
        raise ValueError("roi_size must be positive")
    y0, y1, wy = _sample_axis(box.y1, box.height, h, H)
    x0, x1, wx = _sample_axis(box.x1, box.width, w, W)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bottom = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 128
    roi_size: tuple = (16, 16)
    channels: int = 3
    widths: tuple = (16, 32)

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("embedding dimension must be at least 2")
        h, w = self.roi_size
        step = 2 ** len(self.widths)
        if h < 1 or w < 1 or h % step or w % step:
            raise ValueError(f"roi_size {self.roi_size} must be positive and divisible by {step}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi_size"] = list(self.roi_size)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(d=int(d["d"]), roi_size=tuple(d["roi_size"]),
                   channels=int(d["channels"]), widths=tuple(d["widths"]))


class EncoderNet(nn.Module):
    """conv3x3 -> ReLU -> avgpool2, repeated per width, then a linear
    projection to ``d`` and L2 normalisation."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        convs = []
        c_in = cfg.channels
        for c_out in cfg.widths:
            convs.append(nn.Conv2d(c_in, c_out, 3, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        step = 2 ** len(cfg.widths)
        flat = c_in * (cfg.roi_size[0] // step) * (cfg.roi_size[1] // step)
        self.proj = nn.Linear(flat, cfg.d)
        self.double()

    def forward(self, x):
        for conv in self.convs:
            x = F.avg_pool2d(F.relu(conv(x)), 2)
        return F.normalize(self.proj(x.flatten(1)), dim=1)


class FeatureEncoder:
    """Functional front end over :class:`EncoderNet` working on flat
    parameter vectors and HWC numpy patches."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        self.cfg = cfg
        self.net = EncoderNet(cfg)
        self._shapes = [(name, p.shape) for name, p in self.net.named_parameters()]
        self.n_params = sum(int(np.prod(s)) for _, s in self._shapes)

    def init_params(self, seed: int) -> np.ndarray:
        gen = torch.Generator().manual_seed(int(seed))
        net = EncoderNet(self.cfg)
        with torch.no_grad():
            for p in net.parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                            * np.sqrt(2.0 / fan_in))
                else:
                    p.zero_()
        return self.vector(net)

    @staticmethod
    def vector(net: nn.Module) -> np.ndarray:
        return torch.nn.utils.parameters_to_vector(net.parameters()).detach().numpy().copy()

    def load(self, net: nn.Module, params) -> None:
        vec = torch.as_tensor(self._check_params(params))
        torch.nn.utils.vector_to_parameters(vec, net.parameters())

    def param_dict(self, params) -> dict:
        if isinstance(params, torch.Tensor):
            if params.numel() != self.n_params:
                raise ValueError(f"expected {self.n_params} parameters, got {params.numel()}")
            vec = params.reshape(-1)
        else:
            vec = torch.as_tensor(self._check_params(params))
        out, i = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = vec[i:i + n].view(shape)
            i += n
        return out

    def _check_params(self, params) -> np.ndarray:
        p = np.asarray(params, dtype=np.float64).reshape(-1)
        if p.shape[0] != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {p.shape[0]}")
        return p

    def to_tensor(self, patches) -> torch.Tensor:
        arr = np.asarray(patches, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        expected = (*self.cfg.roi_size, self.cfg.channels)
        if arr.ndim != 4 or arr.shape[1:] != expected:
            raise ValueError(f"patch shape {arr.shape[1:]} does not match encoder input {expected}")
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))

    def forward(self, params, patches) -> torch.Tensor:
        """Differentiable forward pass; ``params`` may be a tensor requiring grad."""
        return functional_call(self.net, self.param_dict(params), (self.to_tensor(patches),))

    def encode(self, params, patches) -> np.ndarray:
        """Embeddings for one patch (returns ``(d,)``) or a stack (``(n, d)``)."""
        single = np.asarray(patches).ndim == 3
        with torch.no_grad():
            out = self.forward(params, patches).numpy()
        return out[0] if single else out

    def encode_with_average(self, state, patches) -> np.ndarray:
        return self.encode(state.average, patches)
