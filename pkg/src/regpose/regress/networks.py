"""Desk-scale pose regression networks and their RPN1 serialization."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from torch import nn

from .. import so3
from ..phantom import TrainingSample
from ..volume import Volume, Slice

ArchTag = Literal["slice_pose", "volume_pose", "correction"]
ARCH_TAGS = ("slice_pose", "volume_pose", "correction")
NETWORK_MAGIC = b"RPN1"

# output scalings keep the linear heads O(1) at init
TRANSLATION_SCALE_MM = 5.0
SLICE_Z_SCALE_MM = 10.0
SLICE_Z_BIAS = 3.0


@dataclass(frozen=True)
class Widths:
    conv: tuple[int, int, int] = (8, 16, 32)
    fc: tuple[int, int] = (64, 32)


DEFAULT_WIDTHS = Widths()
REDUCED_WIDTHS = Widths(conv=(2, 3, 4), fc=(6, 5))


class ConvReluBN(nn.Sequential):
    def __init__(self, cin: int, cout: int, dim: int):
        conv = nn.Conv3d if dim == 3 else nn.Conv2d
        bn = nn.BatchNorm3d if dim == 3 else nn.BatchNorm2d
        super().__init__(conv(cin, cout, 3, padding=1), nn.ReLU(), bn(cout, momentum=0.1))


class Trunk3d(nn.Module):
    """conv x2, pool, conv x2, pool, conv x2, global average pool."""

    def __init__(self, in_channels: int, widths: Widths):
        super().__init__()
        c1, c2, c3 = widths.conv
        self.features = nn.Sequential(
            ConvReluBN(in_channels, c1, 3), ConvReluBN(c1, c1, 3), nn.MaxPool3d(2),
            ConvReluBN(c1, c2, 3), ConvReluBN(c2, c2, 3), nn.MaxPool3d(2),
            ConvReluBN(c2, c3, 3), ConvReluBN(c3, c3, 3),
            nn.AdaptiveAvgPool3d(1), nn.Flatten(),
        )
        f1, f2 = widths.fc
        self.fc = nn.Sequential(nn.Linear(c3, f1), nn.ReLU(), nn.Linear(f1, f2), nn.ReLU())
        self.out_features = f2

    def forward(self, x):
        return self.fc(self.features(x))


class ResBlock2d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(cout, momentum=0.1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout, momentum=0.1)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        y = self.bn1(torch.relu(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        s = x if self.skip is None else self.skip(x)
        return torch.relu(y + s)


class Trunk2d(nn.Module):
    """Residual 2D feature extractor: stem then 4 residual blocks."""

    def __init__(self, in_channels: int, widths: Widths):
        super().__init__()
        c1, c2, c3 = widths.conv
        self.features = nn.Sequential(
            ConvReluBN(in_channels, c1, 2),
            ResBlock2d(c1, c1, 1), ResBlock2d(c1, c2, 2),
            ResBlock2d(c2, c3, 2), ResBlock2d(c3, c3, 1),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        f1, f2 = widths.fc
        self.fc = nn.Sequential(nn.Linear(c3, f1), nn.ReLU(), nn.Linear(f1, f2), nn.ReLU())
        self.out_features = f2

    def forward(self, x):
        return self.fc(self.features(x))


class PoseNetwork(nn.Module):
    """Feature trunk plus regression heads; see `build_network`."""

    def __init__(self, tag: ArchTag, seed: int, widths: Widths = DEFAULT_WIDTHS):
        super().__init__()
        self.tag = tag
        self.seed = seed
        self.widths = widths
        if tag == "slice_pose":
            self.trunk = Trunk2d(1, widths)
        else:
            self.trunk = Trunk3d(2 if tag == "correction" else 1, widths)
        nf = self.trunk.out_features
        self.rotation_head = nn.Linear(nf, 3)
        self.translation_head = nn.Linear(nf, 3) if tag == "correction" else None
        self.location_head = nn.Linear(nf, 1) if tag == "slice_pose" else None

    @property
    def in_channels(self) -> int:
        return 2 if self.tag == "correction" else 1

    @property
    def spatial_dims(self) -> int:
        return 2 if self.tag == "slice_pose" else 3

    def forward(self, x):
        h = self.trunk(x)
        rot = np.pi * torch.tanh(self.rotation_head(h))
        trans = None if self.translation_head is None else TRANSLATION_SCALE_MM * self.translation_head(h)
        z = None if self.location_head is None else SLICE_Z_SCALE_MM * torch.relu(self.location_head(h)).squeeze(-1)
        return rot, trans, z


def _init_weights(net: PoseNetwork) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            nn.init.uniform_(m.weight, -np.sqrt(6.0) * bound, np.sqrt(6.0) * bound)
            nn.init.uniform_(m.bias, -bound, bound)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    with torch.no_grad():
        net.rotation_head.weight.mul_(0.1)
        if net.location_head is not None:
            net.location_head.bias.fill_(SLICE_Z_BIAS)


def build_network(tag: ArchTag, seed: int = 0, widths: Widths = DEFAULT_WIDTHS) -> PoseNetwork:
    """Fresh network for `tag` with fan-in scaled uniform init (He-uniform), BN gamma=1, beta=0.

    volume_pose: 1-channel 3D trunk + rotation head (pi * tanh).
    correction:  2-channel 3D trunk (moving, reference) + rotation head + linear translation head (mm).
    slice_pose:  residual 2D trunk + rotation head + ReLU location head (mm).
    """
    if tag not in ARCH_TAGS:
        raise ValueError(f"unknown architecture tag {tag!r}")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = PoseNetwork(tag, seed, widths)
        _init_weights(net)
    finally:
        torch.random.set_rng_state(gen_state)
    return net.float()


@dataclass
class Heads:
    rotvec: torch.Tensor
    translation: torch.Tensor | None = None
    slice_z: torch.Tensor | None = None


def forward(net: PoseNetwork, x: torch.Tensor, mode: Literal["train", "eval"] = "eval") -> Heads:
    expected = (net.in_channels,) + (None,) * net.spatial_dims
    if x.dim() != net.spatial_dims + 2 or x.shape[1] != net.in_channels:
        raise ValueError(f"{net.tag} expects input of shape (N, {net.in_channels}, "
                         f"{', '.join('*' * (e is None) for e in expected[1:])}), got {tuple(x.shape)}")
    net.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            rot, trans, z = net(x)
    else:
        rot, trans, z = net(x)
    return Heads(rot, trans, z)


def samples_to_tensor(net_or_tag, samples: Sequence[TrainingSample], dtype=torch.float32) -> torch.Tensor:
    tag = net_or_tag if isinstance(net_or_tag, str) else net_or_tag.tag
    if tag == "correction":
        arr = np.stack([np.stack([s.input.data, s.reference.data]) for s in samples])
    else:
        arr = np.stack([s.input.data[None] for s in samples])
    return torch.as_tensor(arr, dtype=dtype)


def image_tensor(images: Sequence[Volume | Slice], reference: Volume | None = None,
                 dtype=torch.float32) -> torch.Tensor:
    if reference is not None:
        arr = np.stack([np.stack([im.data, reference.data]) for im in images])
    else:
        arr = np.stack([im.data[None] for im in images])
    return torch.as_tensor(arr, dtype=dtype)


@dataclass
class Prediction:
    rotvec: np.ndarray          # folded to norm <= pi
    folded: bool
    translation: np.ndarray | None = None
    slice_z: float | None = None

    @property
    def matrix(self) -> np.ndarray:
        return so3.rotvec_to_matrix(self.rotvec)


def predict(net: PoseNetwork, x: torch.Tensor) -> list[Prediction]:
    """Eval-mode forward with head outputs folded to canonical rotation vectors."""
    heads = forward(net, x, "eval")
    rot = heads.rotvec.double().numpy()
    out = []
    for i, v in enumerate(rot):
        folded = bool(np.linalg.norm(v) > np.pi)
        out.append(Prediction(
            so3.fold_rotvec(v), folded,
            None if heads.translation is None else heads.translation[i].double().numpy(),
            None if heads.slice_z is None else float(heads.slice_z[i]),
        ))
    return out


# --- RPN1 serialization ---------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def save_network(path, net: PoseNetwork) -> None:
    """magic, tag, seed, widths, then (name, shape, f32 data) for every tensor in state_dict."""
    state = net.state_dict()
    parts = [NETWORK_MAGIC, _pack_str(net.tag), struct.pack("<q", int(net.seed)),
             struct.pack("<5I", *net.widths.conv, *net.widths.fc), struct.pack("<I", len(state))]
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.asarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_network(path) -> PoseNetwork:
    raw = Path(path).read_bytes()
    if raw[:4] != NETWORK_MAGIC:
        raise ValueError(f"{path}: not an RPN1 network file")
    off = 4

    def read_str():
        nonlocal off
        (n,) = struct.unpack_from("<I", raw, off)
        s = raw[off + 4: off + 4 + n].decode()
        off += 4 + n
        return s

    tag = read_str()
    (seed,) = struct.unpack_from("<q", raw, off)
    off += 8
    w = struct.unpack_from("<5I", raw, off)
    off += 20
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    net = build_network(tag, seed, Widths(tuple(w[:3]), tuple(w[3:])))
    state = net.state_dict()
    for _ in range(count):
        name = read_str()
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
        off += 4 + 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        if name not in state:
            raise ValueError(f"{path}: unexpected tensor {name!r} for architecture {tag}")
        state[name] = torch.as_tensor(arr.copy()).to(state[name].dtype)
    net.load_state_dict(state)
    return net
