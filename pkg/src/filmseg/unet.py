"""3D encoder-decoder segmentation backbone with optional FiLM sites.

A FiLM site sits after the last activation of an encoder stage, of the
bottleneck, or of a decoder stage. Which sites are active is chosen by the
placement; each active site owns a dedicated generator.
"""

import itertools
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from filmseg import FilmSegError
from filmseg.film import (DEFAULT_HIDDEN, FilmGeneratorParams, TimeInput, generate_coefficients,
                          modulate)
from filmseg.metrics import SegmentationMask
from filmseg.phantom import DceStudy
from filmseg.pipeline import canonical_triplet
from filmseg.tensor import (Tensor, concat, conv3d, instance_norm, leaky_relu, softmax_channel,
                            transposed_conv3d)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSEG"
CHECKPOINT_VERSION = 1


class ArchitectureError(FilmSegError):
    """Error raised for an invalid architecture or input size."""
    pass


class CheckpointError(FilmSegError):
    """Error raised when a checkpoint cannot be written or read."""
    pass


class Placement(str, Enum):
    """Where FiLM layers are inserted."""
    NONE = "none"
    ENCODER = "encoder"
    DECODER = "decoder"
    BOTTLENECK = "bottleneck"
    ALL = "all"

    def covers(self, stage: str) -> bool:
        if self is Placement.ALL:
            return True
        return self.value == stage

    @classmethod
    def parse(cls, name: str) -> "Placement":
        try:
            return cls(name.lower())
        except ValueError:
            valid = ", ".join(p.value for p in cls)
            raise ArchitectureError(f"Unknown placement '{name}'. Valid placements: {valid}")


@dataclass
class ArchitectureConfig:
    in_channels: int = 3
    num_classes: int = 2
    stage_channels: Tuple[int, ...] = (8, 16, 32)
    bottleneck_channels: int = 64
    placement: Placement = Placement.NONE
    film_hidden: int = DEFAULT_HIDDEN
    negative_slope: float = 0.01
    norm_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if not isinstance(self.placement, Placement):
            self.placement = Placement.parse(str(self.placement))

    @property
    def depth(self) -> int:
        return len(self.stage_channels)

    def validate(self) -> None:
        if self.in_channels != 3:
            raise ArchitectureError(f"Inputs are phase triplets: in_channels must be 3, got {self.in_channels}")
        if self.num_classes < 2:
            raise ArchitectureError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 2:
            raise ArchitectureError(f"Depth must be >= 2, got stage_channels={self.stage_channels}")
        channels = list(self.stage_channels) + [self.bottleneck_channels]
        if min(channels) < 1 or any(b <= a for a, b in zip(channels, channels[1:])):
            raise ArchitectureError(
                f"Stage channels must be positive and strictly increasing into the bottleneck, got {channels}")

    def sites(self) -> List[str]:
        """Active FiLM sites in dataflow order."""
        all_sites = ([("encoder", f"encoder.{i}") for i in range(self.depth)]
                     + [("bottleneck", "bottleneck")]
                     + [("decoder", f"decoder.{i}") for i in reversed(range(self.depth))])
        return [site for stage, site in all_sites if self.placement.covers(stage)]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["stage_channels"] = list(self.stage_channels)
        data["placement"] = self.placement.value
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ArchitectureConfig":
        return cls(**data)


@dataclass
class ModelParams:
    """Learnable parameters of a configured backbone plus its FiLM generators."""
    config: ArchitectureConfig
    backbone: Dict[str, Tensor]
    film_generators: Dict[str, FilmGeneratorParams] = field(default_factory=dict)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = list(self.backbone.items())
        for site, generator in self.film_generators.items():
            for part, tensor in zip(("w1", "b1", "w2", "b2"), generator.tensors()):
                named.append((f"film.{site}.{part}", tensor))
        return named

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters():
            tensor.data[...] = snapshot[name]

    def count_parameters(self) -> Dict[str, int]:
        backbone = sum(t.size for t in self.backbone.values())
        film = sum(t.size for g in self.film_generators.values() for t in g.tensors())
        return {"backbone": backbone, "film": film, "total": backbone + film}


def _he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _zeros(size: int) -> Tensor:
    return Tensor(np.zeros(size), requires_grad=True)


def _add_conv_block(params: Dict[str, Tensor], prefix: str, c_in: int, c_out: int,
                    rng: np.random.Generator) -> None:
    params[f"{prefix}.conv.weight"] = _he_normal(rng, (c_out, c_in, 3, 3, 3), c_in * 27)
    params[f"{prefix}.conv.bias"] = _zeros(c_out)
    params[f"{prefix}.norm.gain"] = Tensor(np.ones(c_out), requires_grad=True)
    params[f"{prefix}.norm.shift"] = _zeros(c_out)


def build_model(config: ArchitectureConfig) -> ModelParams:
    """Initialize parameters deterministically from ``config.seed``.

    Backbone and generators draw from separate streams, so models that
    differ only in placement share bit-identical backbones.
    """
    config.validate()
    backbone_seq, film_seq = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(backbone_seq)
    stages = config.stage_channels
    params: Dict[str, Tensor] = {}

    c_in = config.in_channels
    for i, c in enumerate(stages):
        _add_conv_block(params, f"encoder.{i}.block1", c_in, c, rng)
        _add_conv_block(params, f"encoder.{i}.block2", c, c, rng)
        params[f"encoder.{i}.down.weight"] = _he_normal(rng, (c, c, 2, 2, 2), c * 8)
        params[f"encoder.{i}.down.bias"] = _zeros(c)
        c_in = c
    _add_conv_block(params, "bottleneck.block1", c_in, config.bottleneck_channels, rng)
    _add_conv_block(params, "bottleneck.block2", config.bottleneck_channels, config.bottleneck_channels, rng)
    c_in = config.bottleneck_channels
    for i in reversed(range(config.depth)):
        c = stages[i]
        # stride equals kernel, so each output voxel sees c_in inputs
        params[f"decoder.{i}.up.weight"] = _he_normal(rng, (c_in, c, 2, 2, 2), c_in)
        params[f"decoder.{i}.up.bias"] = _zeros(c)
        _add_conv_block(params, f"decoder.{i}.block1", 2 * c, c, rng)
        _add_conv_block(params, f"decoder.{i}.block2", c, c, rng)
        c_in = c
    params["head.weight"] = _he_normal(rng, (config.num_classes, c_in, 1, 1, 1), c_in)
    params["head.bias"] = _zeros(config.num_classes)

    film_rng = np.random.default_rng(film_seq)
    generators = {}
    for site in config.sites():
        generators[site] = FilmGeneratorParams.initialize(
            _site_channels(config, site), film_rng, hidden=config.film_hidden)
    return ModelParams(config=config, backbone=params, film_generators=generators)


def _site_channels(config: ArchitectureConfig, site: str) -> int:
    if site == "bottleneck":
        return config.bottleneck_channels
    return config.stage_channels[int(site.split(".")[1])]


def _conv_block(model: ModelParams, prefix: str, x: Tensor) -> Tensor:
    p, cfg = model.backbone, model.config
    x = conv3d(x, p[f"{prefix}.conv.weight"], p[f"{prefix}.conv.bias"], padding=1)
    x = instance_norm(x, p[f"{prefix}.norm.gain"], p[f"{prefix}.norm.shift"], cfg.norm_epsilon)
    return leaky_relu(x, cfg.negative_slope)


def _film_site(model: ModelParams, site: str, x: Tensor, t: TimeInput) -> Tensor:
    generator = model.film_generators.get(site)
    if generator is None:
        return x
    return modulate(x, generate_coefficients(t, generator, model.config.negative_slope))


def forward(model: ModelParams, input: Tensor, t: TimeInput) -> Tensor:
    """Logits N x num_classes x D x H x W for an N x 3 x D x H x W input."""
    cfg = model.config
    if input.ndim != 5 or input.shape[1] != cfg.in_channels:
        raise ArchitectureError(f"Expected input N x {cfg.in_channels} x D x H x W, got {input.shape}")
    factor = 2 ** cfg.depth
    if any(n % factor for n in input.shape[2:]):
        raise ArchitectureError(
            f"Spatial size {input.shape[2:]} must be divisible by 2^depth = {factor}")
    p = model.backbone

    skips = []
    x = input
    for i in range(cfg.depth):
        x = _conv_block(model, f"encoder.{i}.block1", x)
        x = _conv_block(model, f"encoder.{i}.block2", x)
        x = _film_site(model, f"encoder.{i}", x, t)
        skips.append(x)
        x = conv3d(x, p[f"encoder.{i}.down.weight"], p[f"encoder.{i}.down.bias"], stride=2)

    x = _conv_block(model, "bottleneck.block1", x)
    x = _conv_block(model, "bottleneck.block2", x)
    x = _film_site(model, "bottleneck", x, t)

    for i in reversed(range(cfg.depth)):
        x = transposed_conv3d(x, p[f"decoder.{i}.up.weight"], p[f"decoder.{i}.up.bias"], stride=2)
        x = concat([x, skips[i]], axis=1)
        x = _conv_block(model, f"decoder.{i}.block1", x)
        x = _conv_block(model, f"decoder.{i}.block2", x)
        x = _film_site(model, f"decoder.{i}", x, t)

    return conv3d(x, p["head.weight"], p["head.bias"])


def window_starts(size: int, patch: int, overlap: float = 0.5) -> List[int]:
    """Window origins along one axis; the last window is flush with the border."""
    step = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, size - patch + 1, step))
    if starts[-1] + patch < size:
        starts.append(size - patch)
    return starts


def sliding_window_probabilities(model: ModelParams, channels: np.ndarray, t: TimeInput,
                                 patch_size: Optional[Sequence[int]] = None,
                                 overlap: float = 0.5) -> np.ndarray:
    """Class probabilities C x D x H x W averaged over overlapping windows.

    Axes shorter than the window are zero-padded up to a multiple of
    2^depth before inference; the result is cropped back to the input shape.

    Args:
        model: Network to run
        channels: Prepared triplet, 3 x D x H x W
        t: Acquisition times of the triplet
        patch_size: Window size; the whole (padded) volume when None
        overlap: Fraction of the window shared by neighbouring windows

    Returns:
        np.ndarray: Float64 probabilities, num_classes x D x H x W
    """
    shape = tuple(channels.shape[1:])
    factor = 2 ** model.config.depth
    fitted = tuple(-(-n // factor) * factor for n in shape)
    patch = fitted if patch_size is None else tuple(min(p, f) for p, f in zip(patch_size, fitted))
    padded = tuple(max(n, p) for n, p in zip(shape, patch))
    if padded != shape:
        channels = np.pad(channels, [(0, 0)] + [(0, p - n) for n, p in zip(shape, padded)])
    total = np.zeros((model.config.num_classes,) + padded, dtype=np.float64)
    counts = np.zeros(padded, dtype=np.float64)
    for origin in itertools.product(*(window_starts(n, p, overlap) for n, p in zip(padded, patch))):
        window = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        x = Tensor(channels[(slice(None),) + window][None])
        probs = softmax_channel(forward(model, x, t)).data[0]
        total[(slice(None),) + window] += probs
        counts[window] += 1.0
    crop = tuple(slice(0, n) for n in shape)
    return (total / counts)[(slice(None),) + crop]


def predict_mask(model: ModelParams, study: DceStudy, patch_size: Optional[Sequence[int]] = None,
                 overlap: float = 0.5, triplet_index: int = 0) -> SegmentationMask:
    """Argmax segmentation of a prepared study from its canonical triplet."""
    triplet = canonical_triplet(study, triplet_index)
    probs = sliding_window_probabilities(model, triplet.channels, triplet.times, patch_size, overlap)
    return SegmentationMask(data=probs.argmax(axis=0).astype(np.uint8), spacing=study.spacing)


@dataclass
class Checkpoint:
    model: ModelParams
    epoch: int = 0
    header: Dict = field(default_factory=dict)
    path: Optional[str] = None


def save_checkpoint(model: ModelParams, path: str, epoch: int = 0,
                    extra: Optional[Dict] = None) -> Checkpoint:
    """Write magic, u32 version, u32 header length, JSON header, then the f32 parameter blob."""
    named = model.named_parameters()
    header = {
        "architecture": model.config.to_dict(),
        "placement": model.config.placement.value,
        "seed": model.config.seed,
        "epoch": epoch,
        "parameters": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    header.update(extra or {})
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(encoded)))
            f.write(encoded)
            for _, tensor in named:
                f.write(tensor.data.astype("<f4").tobytes())
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}")
    return Checkpoint(model=model, epoch=epoch, header=header, path=path)


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint and rebuild its model.

    Args:
        path: Checkpoint file

    Returns:
        Checkpoint: Model, epoch and header

    Raises:
        CheckpointError: If the magic, version, header or parameter blob is invalid
    """
    try:
        with open(path, "rb") as f:
            content = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if content[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    if len(content) < 12:
        raise CheckpointError(f"{path} is truncated")
    version, header_length = struct.unpack("<II", content[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")
    try:
        header = json.loads(content[12:12 + header_length].decode("utf-8"))
        config = ArchitectureConfig.from_dict(header["architecture"])
        expected = [(entry["name"], tuple(entry["shape"])) for entry in header["parameters"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}")
    model = build_model(config)
    named = model.named_parameters()
    if expected != [(name, t.shape) for name, t in named]:
        raise CheckpointError(f"Checkpoint {path} does not match its declared architecture")
    payload = content[12 + header_length:]
    if len(payload) % 4:
        raise CheckpointError(f"Checkpoint {path} has a truncated parameter blob")
    blob = np.frombuffer(payload, dtype="<f4")
    if blob.size != sum(t.size for _, t in named):
        raise CheckpointError(f"Checkpoint {path} holds {blob.size} values, expected "
                              f"{sum(t.size for _, t in named)}")
    offset = 0
    for _, tensor in named:
        tensor.data[...] = blob[offset:offset + tensor.size].reshape(tensor.shape)
        offset += tensor.size
    return Checkpoint(model=model, epoch=int(header.get("epoch", 0)), header=header, path=path)
