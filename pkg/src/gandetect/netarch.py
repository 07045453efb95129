"""Detector network: stride-1 stem, residual stages, global pooling, swappable head."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import ContractError, Parameter, RngStream, Tensor

PROJECTION = "projection"
CLASSIFIER = "classifier"
CHECKPOINT_MAGIC = b"GDCKPT\x00\x01"
CHECKPOINT_VERSION = 1
# fixed input standardization, applied inside the network
INPUT_MEAN = 0.5
INPUT_STD = 0.25


class InputTooSmallError(ValueError):
    pass


@dataclass
class DetectorConfig:
    stem_channels: int = 16
    block_widths: list[int] = field(default_factory=lambda: [16, 32])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1])
    stem_stride: int = 1
    downsample_after_stage: list[bool] = field(default_factory=lambda: [True, False])
    projection_dims: tuple[int, int] = (256, 64)
    crop_size: int = 96

    def __post_init__(self):
        self.block_widths = [int(v) for v in self.block_widths]
        self.blocks_per_stage = [int(v) for v in self.blocks_per_stage]
        self.downsample_after_stage = [bool(v) for v in self.downsample_after_stage]
        self.projection_dims = tuple(int(v) for v in self.projection_dims)
        self.validate()

    def validate(self) -> None:
        if self.stem_stride != 1:
            raise ContractError(f"stem_stride must be 1 (no subsampling in the first layer), got {self.stem_stride}")
        n = len(self.block_widths)
        if n == 0:
            raise ContractError("block_widths must name at least one stage")
        if len(self.blocks_per_stage) != n or len(self.downsample_after_stage) != n:
            raise ContractError("block_widths, blocks_per_stage and downsample_after_stage must have equal length")
        if self.stem_channels < 1 or min(self.block_widths) < 1:
            raise ContractError("all channel widths must be >= 1")
        if min(self.blocks_per_stage) < 1:
            raise ContractError("blocks_per_stage entries must be >= 1")
        if len(self.projection_dims) != 2 or self.projection_dims[0] < 1:
            raise ContractError(f"projection_dims must be (hidden, latent), got {self.projection_dims}")
        if self.projection_dims[1] < 2:
            raise ContractError(f"projection latent dim must be >= 2, got {self.projection_dims[1]}")
        if self.crop_size < 1:
            raise ContractError("crop_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projection_dims"] = list(self.projection_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)

    def layer_plan(self) -> list[tuple[str, int, int, int]]:
        """``(name, in_channels, out_channels, stride)`` for every residual block."""
        plan = []
        c_in = self.stem_channels
        for s, (width, nblocks, down) in enumerate(zip(self.block_widths, self.blocks_per_stage,
                                                       self.downsample_after_stage)):
            for b in range(nblocks):
                stride = 2 if (down and b == nblocks - 1) else 1
                plan.append((f"stages.{s}.{b}", c_in, width, stride))
                c_in = width
        return plan

    def min_input_size(self) -> int:
        """Receptive field of one output unit of the deepest convolution."""
        rf, jump = 3, 1  # stem
        for _, _, _, stride in self.layer_plan():
            rf += 2 * jump          # conv1 (3x3, carries the stride)
            jump *= stride
            rf += 2 * jump          # conv2 (3x3)
        return rf

    def parameter_count(self, head_kind: str = PROJECTION) -> int:
        """Layer-by-layer count from the config alone (backbone plus head)."""
        n = 3 * self.stem_channels * 9 + self.stem_channels + 2 * self.stem_channels
        for _, c_in, c_out, stride in self.layer_plan():
            n += c_in * c_out * 9 + c_out + 2 * c_out
            n += c_out * c_out * 9 + c_out + 2 * c_out
            if c_in != c_out or stride != 1:
                n += c_in * c_out
        f = self.feature_dim
        if head_kind == PROJECTION:
            hidden, latent = self.projection_dims
            n += f * hidden + hidden + hidden * latent + latent
        else:
            n += f + 1
        return n

    @property
    def feature_dim(self) -> int:
        return self.block_widths[-1]


def _he(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return gen.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class DetectorNetwork:
    """Parameters live in one ordered name -> Parameter mapping.

    The layer graph is mirror-pad / conv / channel-affine / relu / residual
    add / global pool / fully connected only: there is no resampling node
    anywhere. Mirror padding keeps a constant input constant through every
    layer, so pooled features of flat images do not depend on resolution.
    """

    def __init__(self, config: DetectorConfig, params: dict[str, Parameter], head_kind: str):
        self.config = config
        self.params = params
        self.head_kind = head_kind

    # -- construction -------------------------------------------------------

    @staticmethod
    def backbone_shapes(config: DetectorConfig) -> list[tuple[str, tuple[int, ...], str]]:
        """``(name, shape, init)`` with init one of ``he:<fan_in>``, ``ones``, ``zeros``."""
        shapes = []

        def conv(prefix, c_in, c_out, k, bias=True):
            shapes.append((f"{prefix}.weight", (c_out, c_in, k, k), f"he:{c_in * k * k}"))
            if bias:
                shapes.append((f"{prefix}.bias", (c_out,), "zeros"))

        def norm(prefix, c):
            shapes.append((f"{prefix}.scale", (c,), "ones"))
            shapes.append((f"{prefix}.shift", (c,), "zeros"))

        conv("stem.conv", 3, config.stem_channels, 3)
        norm("stem.norm", config.stem_channels)
        for name, c_in, c_out, stride in config.layer_plan():
            conv(f"{name}.conv1", c_in, c_out, 3)
            norm(f"{name}.norm1", c_out)
            conv(f"{name}.conv2", c_out, c_out, 3)
            norm(f"{name}.norm2", c_out)
            if c_in != c_out or stride != 1:
                conv(f"{name}.shortcut", c_in, c_out, 1, bias=False)
        return shapes

    @staticmethod
    def head_shapes(config: DetectorConfig, kind: str) -> list[tuple[str, tuple[int, ...], str]]:
        f = config.feature_dim
        if kind == PROJECTION:
            hidden, latent = config.projection_dims
            return [("head.fc1.weight", (hidden, f), f"he:{f}"), ("head.fc1.bias", (hidden,), "zeros"),
                    ("head.fc2.weight", (latent, hidden), f"he:{hidden}"), ("head.fc2.bias", (latent,), "zeros")]
        if kind == CLASSIFIER:
            return [("head.fc.weight", (1, f), f"he:{f}"), ("head.fc.bias", (1,), "zeros")]
        raise ContractError(f"unknown head kind {kind!r}")

    @staticmethod
    def _init(shapes, gen: np.random.Generator) -> dict[str, Parameter]:
        params = {}
        for name, shape, init in shapes:
            if init == "ones":
                v = np.ones(shape)
            elif init == "zeros":
                v = np.zeros(shape)
            else:
                v = _he(gen, shape, int(init.split(":")[1]))
            params[name] = Parameter(v, name=name)
        return params

    # -- forward --------------------------------------------------------------

    def _p(self, name: str) -> Parameter:
        return self.params[name]

    def check_input(self, h: int, w: int) -> None:
        m = self.config.min_input_size()
        if h < m or w < m:
            raise InputTooSmallError(f"input {h}x{w} is below the network minimum of {m}x{m}")

    def features(self, x: Tensor) -> Tensor:
        """Backbone + global average pooling for ``N x 3 x H x W`` (or ``3 x H x W``) input."""
        self.check_input(*x.shape[-2:])
        p = self._p
        x = tc.mul(tc.add(x, -INPUT_MEAN), 1.0 / INPUT_STD)
        h = tc.conv2d(tc.pad2d(x, 1), p("stem.conv.weight"), p("stem.conv.bias"), stride=1)
        h = tc.relu(tc.channel_affine(h, p("stem.norm.scale"), p("stem.norm.shift")))
        for name, c_in, c_out, stride in self.config.layer_plan():
            y = tc.conv2d(tc.pad2d(h, 1), p(f"{name}.conv1.weight"), p(f"{name}.conv1.bias"), stride=stride)
            y = tc.relu(tc.channel_affine(y, p(f"{name}.norm1.scale"), p(f"{name}.norm1.shift")))
            y = tc.conv2d(tc.pad2d(y, 1), p(f"{name}.conv2.weight"), p(f"{name}.conv2.bias"), stride=1)
            y = tc.channel_affine(y, p(f"{name}.norm2.scale"), p(f"{name}.norm2.shift"))
            if f"{name}.shortcut.weight" in self.params:
                sc = tc.conv2d(h, p(f"{name}.shortcut.weight"), None, stride=stride, padding=0)
            else:
                sc = h
            h = tc.relu(tc.add(y, sc))
        return tc.global_average_pool(h)

    def head(self, feats: Tensor) -> Tensor:
        p = self._p
        if self.head_kind == PROJECTION:
            z = tc.relu(tc.affine(feats, p("head.fc1.weight"), p("head.fc1.bias")))
            return tc.affine(z, p("head.fc2.weight"), p("head.fc2.bias"))
        return tc.affine(feats, p("head.fc.weight"), p("head.fc.bias"))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def stem_output(self, x: Tensor) -> Tensor:
        p = self._p
        return tc.conv2d(tc.pad2d(x, 1), p("stem.conv.weight"), p("stem.conv.bias"), stride=1)

    # -- public API -----------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self) -> None:
        tc.zero_grads(self.params.values())

    def layer_kinds(self) -> list[str]:
        """Operation kinds on the forward path, for structural assertions."""
        kinds = ["pad2d", "conv2d(stride=1)", "channel_affine", "relu"]
        for _, c_in, c_out, stride in self.config.layer_plan():
            kinds += ["pad2d", f"conv2d(stride={stride})", "channel_affine", "relu", "pad2d",
                      "conv2d(stride=1)", "channel_affine", "add", "relu"]
        kinds += ["global_average_pool"]
        kinds += ["affine", "relu", "affine"] if self.head_kind == PROJECTION else ["affine", "sigmoid"]
        return kinds


def build_detector(config: DetectorConfig, rng: RngStream, head_kind: str = PROJECTION) -> DetectorNetwork:
    config.validate()
    params = DetectorNetwork._init(DetectorNetwork.backbone_shapes(config), rng.child("backbone").generator())
    params.update(DetectorNetwork._init(DetectorNetwork.head_shapes(config, head_kind),
                                        rng.child(f"head/{head_kind}").generator()))
    return DetectorNetwork(config, params, head_kind)


def image_to_tensor(image: np.ndarray) -> Tensor:
    """``H x W x 3`` image -> ``3 x H x W`` tensor."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"image must be HxWx3, got {image.shape}")
    return Tensor(image.transpose(2, 0, 1))


def images_to_batch(images) -> Tensor:
    return Tensor(np.stack([np.asarray(im, dtype=np.float64).transpose(2, 0, 1) for im in images]))


def embed(net: DetectorNetwork, image: np.ndarray) -> np.ndarray:
    """Raw (unnormalized) projection-head latent for one image."""
    if net.head_kind != PROJECTION:
        raise ContractError("embed requires a network with a projection head")
    return net.forward(image_to_tensor(image)).data.copy()


def classify_logit(net: DetectorNetwork, image: np.ndarray) -> float:
    if net.head_kind != CLASSIFIER:
        raise ContractError("classify requires a network with a classifier head")
    return float(net.forward(image_to_tensor(image)).data[0])


def classify(net: DetectorNetwork, image: np.ndarray) -> float:
    """Probability that ``image`` is synthetic, at the image's native resolution."""
    return float(tc.sigmoid(Tensor(classify_logit(net, image))).data)


def classify_batch(net: DetectorNetwork, images) -> np.ndarray:
    """Scores for equally sized images in one pass."""
    if net.head_kind != CLASSIFIER:
        raise ContractError("classify requires a network with a classifier head")
    logits = net.forward(images_to_batch(images))
    return tc.sigmoid(logits).data[:, 0].copy()


def swap_head(net: DetectorNetwork, new_head_kind: str, rng: RngStream) -> DetectorNetwork:
    """Replace the head; backbone values are copied bit-exact and everything stays trainable."""
    if new_head_kind == net.head_kind:
        raise ContractError(f"network already has a {new_head_kind} head")
    params = {}
    for name, p in net.params.items():
        if not name.startswith("head."):
            params[name] = Parameter(p.data.copy(), name=name)
    params.update(DetectorNetwork._init(DetectorNetwork.head_shapes(net.config, new_head_kind),
                                        rng.child(f"head/{new_head_kind}").generator()))
    return DetectorNetwork(net.config, params, new_head_kind)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------
#
# layout: magic (8 bytes) | header length (uint64 LE) | JSON header | raw
# little-endian float64 values in header order

def save_checkpoint(net: DetectorNetwork, path: str | Path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, p in net.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "head": net.head_kind,
        "params": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


class CheckpointError(ValueError):
    pass


def read_checkpoint_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a detector checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, raw[16 + n:]


def load_checkpoint(path: str | Path) -> DetectorNetwork:
    header, body = read_checkpoint_header(path)
    config = DetectorConfig.from_dict(header["config"])
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = Parameter(arr.astype(np.float64), name=e["name"])
    expected = [n for n, _, _ in DetectorNetwork.backbone_shapes(config) + DetectorNetwork.head_shapes(config, header["head"])]
    if sorted(expected) != sorted(params):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    return DetectorNetwork(config, {n: params[n] for n in expected}, header["head"])
