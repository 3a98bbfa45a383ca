"""Network building blocks, gradient checking, and checkpoint I/O.

Shapes follow the separation contract: the appearance encoder maps a
3xHxW image to K x H/16 x W/16 feature maps and pools them into a K-vector,
the sound network maps a 1x256x256 log spectrogram to K maps of the same
spatial size.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import ARTIFACT_SCHEMA_VERSION
from .errors import ConfigError, ValidationError

APPEARANCE_PRESETS = {"small": (8, 16, 32, 32), "large": (16, 32, 64, 64)}
SOUND_ARCHS = ("unet-small", "mv2-small")


class AppearanceNet(nn.Module):
    """Four downsampling blocks followed by a 1x1 projection to K channels.

    The first two blocks are strided 3x3 convolutions; the last two max-pool
    and mix channels with 1x1 convolutions, so a cell of the 1/16 resolution
    output sees about 31 px rather than the whole image. With a whole-image
    view the pairwise attention still separates categories but its peak
    drifts off the object.

    Convolutions are batch-normalized and He-initialized; with the default
    initialization the maps of different images start out nearly identical,
    which stalls the pairwise attention objective at chance.
    """

    def __init__(self, k: int = 16, preset: str = "small"):
        super().__init__()
        if preset not in APPEARANCE_PRESETS:
            raise ConfigError(f"unknown appearance preset {preset!r}")
        widths = APPEARANCE_PRESETS[preset]
        layers, c_in = [], 3
        for i, c in enumerate(widths):
            if i < 2:
                layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1, bias=False),
                           nn.BatchNorm2d(c), nn.ReLU(inplace=True),
                           nn.Conv2d(c, c, 3, padding=1, bias=False)]
            else:
                # pooled 1x1 blocks keep each output cell's view near 31 px
                layers += [nn.MaxPool2d(2), nn.Conv2d(c_in, c, 1, bias=False),
                           nn.BatchNorm2d(c), nn.ReLU(inplace=True),
                           nn.Conv2d(c, c, 1, bias=False)]
            layers += [nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(c_in, k, 1)
        self.k = k
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, image: torch.Tensor):
        """Return ``(maps, embedding)``; embedding is sigmoid of the spatial max."""
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            raise ConfigError(f"image size {h}x{w} is not divisible by 16")
        maps = self.proj(self.body(image))
        return maps, embed_from_maps(maps)


def embed_from_maps(maps: torch.Tensor) -> torch.Tensor:
    """Spatial max pool then sigmoid: ``e_k = sigmoid(max_xy maps_k)``."""
    return torch.sigmoid(maps.amax(dim=(-2, -1)))


class Classifier(nn.Module):
    """Appearance classifier: C feature maps, spatial max pool, softmax."""

    def __init__(self, n_classes: int, preset: str = "small"):
        super().__init__()
        self.encoder = AppearanceNet(n_classes, preset)

    def logits(self, image):
        maps = self.encoder.proj(self.encoder.body(image))
        return maps, maps.amax(dim=(-2, -1))

    def forward(self, image):
        return torch.softmax(self.logits(image)[1], dim=-1)


def _freq_coord(x: torch.Tensor) -> torch.Tensor:
    """A fixed plane ramping from -1 (lowest bin) to 1 along frequency."""
    b, _, h, w = x.shape
    ramp = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
    return ramp.view(1, 1, h, 1).expand(b, 1, h, w)


class UNet(nn.Module):
    """Encoder-decoder with skip connections, one conv per level each way.

    Widths run ``base, base, 2*base, 4*base, 8*base, ...``; the decoder's
    full-resolution stage is a 1x1 conv, which keeps CPU training cheap.
    """

    def __init__(self, k: int = 16, base: int = 8, depth: int = 5):
        super().__init__()
        widths = [base] + [base * 2 ** i for i in range(depth - 1)]
        self.down = nn.ModuleList()
        c_in = 2
        for c in widths:
            self.down.append(nn.Sequential(nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(inplace=True)))
            c_in = c
        self.up = nn.ModuleList()
        for i, c_skip in enumerate(reversed(widths[:-1])):
            ks = 1 if i == depth - 2 else 3
            self.up.append(nn.Sequential(nn.Conv2d(c_in + c_skip, c_skip, ks, padding=ks // 2),
                                         nn.ReLU(inplace=True)))
            c_in = c_skip
        self.head = nn.Conv2d(c_in, k, 1)

    def forward(self, x):
        h = torch.cat([x, _freq_coord(x)], dim=1)
        skips = []
        for i, block in enumerate(self.down):
            if i:
                h = F.max_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        return self.head(h)


class InvertedResidual(nn.Module):
    def __init__(self, c_in, c_out, stride, expand=4):
        super().__init__()
        hidden = c_in * expand
        self.use_res = stride == 1 and c_in == c_out
        self.block = nn.Sequential(
            nn.Conv2d(c_in, hidden, 1), nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, hidden, 3, stride=stride, padding=1, groups=hidden),
            nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, c_out, 1),
        )

    def forward(self, x):
        y = self.block(x)
        return x + y if self.use_res else y


class MV2Net(nn.Module):
    """Lightweight inverted-residual encoder with an additive-skip decoder."""

    def __init__(self, k: int = 16, width: float = 0.5):
        super().__init__()
        chans = [max(4, int(round(c * width))) for c in (32, 16, 24, 32, 64)]
        self.stem = nn.Sequential(nn.Conv2d(2, chans[0], 3, padding=1), nn.ReLU6(inplace=True))
        self.enc = nn.ModuleList(
            [InvertedResidual(chans[i], chans[i + 1], 2) for i in range(len(chans) - 1)])
        self.lat = nn.ModuleList([nn.Conv2d(c, chans[-1], 1) for c in chans[:-1]])
        self.dec = nn.ModuleList([InvertedResidual(chans[-1], chans[-1], 1) for _ in chans[:-1]])
        self.head = nn.Conv2d(chans[-1], k, 1)

    def forward(self, x):
        h = self.stem(torch.cat([x, _freq_coord(x)], dim=1))
        skips = [h]
        for block in self.enc:
            h = block(h)
            skips.append(h)
        for lat, dec, skip in zip(reversed(self.lat), self.dec, reversed(skips[:-1])):
            h = F.interpolate(h, scale_factor=2, mode="nearest") + lat(skip)
            h = dec(h)
        return self.head(h)


def build_sound_net(arch: str, k: int) -> nn.Module:
    if arch == "unet-small":
        return UNet(k, base=8, depth=5)
    if arch == "mv2-small":
        return MV2Net(k, width=0.5)
    raise ConfigError(f"unknown sound architecture {arch!r}; choose from {SOUND_ARCHS}")


def check_logspec_input(x: torch.Tensor):
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[-2] % 16 or x.shape[-1] % 16:
        raise ValidationError(f"sound input must be Bx1xHxW with H, W divisible by 16, got {tuple(x.shape)}")


# -- gradient checking -------------------------------------------------------

def grad_check(fn, inputs, step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    ``fn`` maps the tensors in ``inputs`` to a tensor; non-scalar outputs are
    reduced against a fixed random cotangent. Each input element is perturbed
    by ``step * max(1, |x|)``. Runs in float64.
    """
    xs = [torch.as_tensor(x, dtype=torch.float64).detach().clone() for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    probe = fn(*xs)
    cot = torch.randn(probe.shape, generator=gen, dtype=torch.float64)

    def scalar(*args):
        return (fn(*args) * cot).sum()

    leaves = [x.clone().requires_grad_(True) for x in xs]
    analytic = torch.autograd.grad(scalar(*leaves), leaves, allow_unused=True)

    num, den = 0.0, 0.0
    with torch.no_grad():
        for i, x in enumerate(xs):
            flat = x.view(-1)
            fd = torch.zeros_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                h = step * max(1.0, abs(orig))
                flat[j] = orig + h
                up = scalar(*xs).item()
                flat[j] = orig - h
                down = scalar(*xs).item()
                flat[j] = orig
                fd[j] = (up - down) / (2 * h)
            a = analytic[i]
            a = torch.zeros_like(fd) if a is None else a.reshape(-1)
            num = max(num, (a - fd).abs().max().item())
            den = max(den, a.abs().max().item(), fd.abs().max().item())
    return num / max(den, 1e-300)


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"AVSEPCKP"


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict | None = None
    version: int = ARTIFACT_SCHEMA_VERSION

    def to_bytes(self) -> bytes:
        index, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            dtype = arr.dtype.newbyteorder("<")
            raw = arr.astype(dtype, copy=False).tobytes()
            index.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {"version": self.version, "config": self.config, "epoch": self.epoch,
                  "rng_state": self.rng_state, "extra": self.extra, "tensors": index}
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<Q", len(head)))
        buf.write(head)
        for raw in blobs:
            buf.write(raw)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != _MAGIC:
            raise ValidationError("not a checkpoint file")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + n])
        if header["version"] > ARTIFACT_SCHEMA_VERSION:
            raise ValidationError(f"checkpoint version {header['version']} is newer than supported")
        body = data[16 + n:]
        tensors = {}
        for t in header["tensors"]:
            raw = body[t["offset"]:t["offset"] + t["nbytes"]]
            tensors[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        return cls(header["config"], tensors, header["epoch"], header["rng_state"],
                   header["extra"], header["version"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def state_to_numpy(module: nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_state(module: nn.Module, tensors: dict, prefix: str = ""):
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in tensors.items()
             if k.startswith(prefix)}
    module.load_state_dict(state)
