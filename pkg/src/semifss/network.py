"""Shared-encoder few-shot segmentation network with a denoising head.

Parameter groups:
    encoder   -- VGG-style feature extractor, output stride 4
    decoder   -- prototype fusion + two upsampling blocks -> foreground probability
    denoiser  -- two upsampling blocks -> reconstructed image

Tensors are NCHW internally; images and masks enter as H×W×Ch / H×W numpy arrays.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyMask,
    IndivisibleInput,
    MixedClasses,
    ShapeMismatch,
)

STRIDE = 4
FUSION_MODES = ("concat", "cosine")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    encoder_widths: tuple[int, ...] = (64, 128, 256, 512)
    convs_per_block: tuple[int, ...] = (2, 2, 3, 3)
    decoder_widths: tuple[int, int] = (128, 64)
    denoiser_widths: tuple[int, int] = (128, 64)
    fusion: str = "concat"
    input_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        # tuples survive JSON round trips as lists
        for name in ("encoder_widths", "convs_per_block", "decoder_widths", "denoiser_widths", "input_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.encoder_widths) != 4 or len(self.convs_per_block) != 4:
            raise ValueError("the encoder has exactly four blocks")
        if len(self.decoder_widths) != 2 or len(self.denoiser_widths) != 2:
            raise ValueError("decoder and denoiser have exactly two blocks")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")

    @property
    def feature_dim(self) -> int:
        return self.encoder_widths[-1]

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


TINY_CONFIG = ModelConfig(
    in_channels=3,
    encoder_widths=(16, 32, 32, 32),
    convs_per_block=(1, 1, 1, 1),
    decoder_widths=(32, 16),
    denoiser_widths=(16, 16),
    input_size=(32, 32),
)


@dataclass
class Prototype:
    values: torch.Tensor  # (M,)
    class_id: str | None = None


def _conv(cin, cout, dilation=1):
    return nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation)


class Encoder(nn.Module):
    """Four VGG blocks; blocks 1-2 end in 2x2 max-pooling, blocks 3-4 use dilation 2."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        cin = cfg.in_channels
        for b, (width, n_convs) in enumerate(zip(cfg.encoder_widths, cfg.convs_per_block)):
            dilation = 1 if b < 2 else 2
            for _ in range(n_convs):
                layers += [_conv(cin, width, dilation), nn.ReLU(inplace=True)]
                cin = width
            if b < 2:
                layers.append(nn.MaxPool2d(2))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class DecodeBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            _conv(cin, cout),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Head(nn.Module):
    """Two decode blocks then a 1x1 projection to ``out_channels`` logits."""

    def __init__(self, cin, widths, out_channels):
        super().__init__()
        self.blocks = nn.Sequential(DecodeBlock(cin, widths[0]), DecodeBlock(widths[0], widths[1]))
        self.out = nn.Conv2d(widths[1], out_channels, 1)

    def forward(self, x):
        return self.out(self.blocks(x))


def cosine_map(features, prototype):
    """Per-location cosine similarity, (N,M,H,W) x (N,M) -> (N,1,H,W); zero vectors give 0."""
    dot = (features * prototype[:, :, None, None]).sum(1, keepdim=True)
    fn = features.norm(dim=1, keepdim=True)
    pn = prototype.norm(dim=1)[:, None, None, None]
    denom = fn * pn
    return torch.where(denom > 0, dot / denom.clamp_min(1e-12), torch.zeros_like(dot))


class FewShotSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig = TINY_CONFIG, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        m = cfg.feature_dim
        fused = 2 * m if cfg.fusion == "concat" else m + 1
        self.encoder = Encoder(cfg)
        self.decoder = Head(fused, cfg.decoder_widths, 1)
        self.denoiser = Head(m, cfg.denoiser_widths, cfg.in_channels)
        if seed is not None:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        """Fan-in scaled (He) uniform conv weights, zero biases, from a private generator."""
        gen = torch.Generator().manual_seed(int(seed))
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_uniform_(mod.weight, nonlinearity="relu", generator=gen)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.BatchNorm2d):
                mod.reset_parameters()

    def parameter_groups(self):
        return {"encoder": self.encoder, "decoder": self.decoder, "denoiser": self.denoiser}

    # -- forward pieces -------------------------------------------------------------
    def encode(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise IndivisibleInput(f"input {h}x{w} is not divisible by the encoder stride {STRIDE}")
        return self.encoder(images)

    def fuse(self, prototype: torch.Tensor, query_features: torch.Tensor) -> torch.Tensor:
        n, m, h, w = query_features.shape
        if prototype.dim() == 1:
            prototype = prototype.expand(n, -1)
        if prototype.shape[-1] != m:
            raise DimensionMismatch(f"prototype has {prototype.shape[-1]} channels, features have {m}")
        if self.cfg.fusion == "concat":
            return torch.cat([query_features, prototype[:, :, None, None].expand(n, m, h, w)], dim=1)
        return torch.cat([query_features, cosine_map(query_features, prototype)], dim=1)

    def fuse_and_decode(self, prototype, query_features) -> torch.Tensor:
        """Foreground probability at full resolution, (N, H, W)."""
        if isinstance(prototype, Prototype):
            prototype = prototype.values
        return torch.sigmoid(self.decoder(self.fuse(prototype, query_features)))[:, 0]

    def denoise_forward(self, corrupted: torch.Tensor) -> torch.Tensor:
        """Reconstruction in (0, 1) with the input's shape."""
        return torch.sigmoid(self.denoiser(self.encode(corrupted)))


# -- numpy <-> tensor helpers ------------------------------------------------------------

def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """H×W×Ch array or sequence of them -> N×Ch×H×W tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def encode(model: FewShotSegNet, image) -> torch.Tensor:
    """Features of one H×W×Ch image as an M×H/4×W/4 tensor."""
    x = image if torch.is_tensor(image) else images_to_tensor(image, next(model.parameters()).dtype)
    if x.dim() == 3:
        x = x[None]
    return model.encode(x)[0]


def masked_average_pool(features, mask) -> torch.Tensor:
    """Mean feature vector over the mask's foreground locations.

    features: M×H'×W' (tensor or array); mask: H'×W' in {0, 1}. Returns an M-vector.
    """
    features = torch.as_tensor(features)
    mask = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask).to(features.dtype)
    if features.shape[-2:] != mask.shape:
        raise DimensionMismatch(f"mask {tuple(mask.shape)} does not match features {tuple(features.shape[-2:])}")
    area = mask.sum()
    if area <= 0:
        raise EmptyMask("cannot pool over an empty mask")
    return (features * mask).sum(dim=(-2, -1)) / area


def aggregate_prototypes(protos) -> Prototype:
    """Element-wise mean of k prototypes of one class."""
    protos = list(protos)
    if not protos:
        raise ValueError("need at least one prototype")
    classes = {p.class_id for p in protos}
    if len(classes) > 1:
        raise MixedClasses(f"prototypes from several classes: {sorted(map(str, classes))}")
    sizes = {p.values.shape for p in protos}
    if len(sizes) > 1:
        raise DimensionMismatch(f"prototype sizes differ: {sizes}")
    return Prototype(torch.stack([p.values for p in protos]).mean(0), protos[0].class_id)


# -- checkpoints -------------------------------------------------------------------------

MAGIC = b"SEMIFSS\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: FewShotSegNet
    config: ModelConfig
    optimizer_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _optimizer_arrays(state_dict):
    arrays, per_param = {}, {}
    # sorted: torch keeps state in first-update order, which a reload does not reproduce
    for idx, entry in sorted(state_dict["state"].items()):
        keys = []
        for key, value in entry.items():
            arrays[f"optim/{idx}/{key}"] = value
            keys.append(key)
        per_param[str(idx)] = keys
    return arrays, {"param_groups": state_dict["param_groups"], "state_keys": per_param}


def save_checkpoint(model: FewShotSegNet, path, optimizer=None, meta=None) -> Path:
    """Write a self-describing container.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
    (version, model config, meta, array directory), then raw little-endian array bytes.
    """
    path = Path(path)
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    header = {"version": FORMAT_VERSION, "config": model.cfg.to_dict(), "meta": meta or {}}
    if optimizer is not None:
        opt_arrays, opt_header = _optimizer_arrays(optimizer.state_dict())
        arrays.update(opt_arrays)
        header["optimizer"] = opt_header
    directory, blobs, offset = [], [], 0
    for name, tensor in arrays.items():
        arr = tensor.detach().cpu().numpy() if torch.is_tensor(tensor) else np.asarray(tensor)
        shape = list(arr.shape)  # ascontiguousarray promotes 0-d arrays to 1-d
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": shape,
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header["arrays"] = directory
    raw = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def read_checkpoint_file(path):
    """Parse a checkpoint into (header, {name: ndarray})."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a semifss checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported format version {header.get('version')}")
    body = data[16 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise CorruptCheckpoint(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(body[start:start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    header, arrays = read_checkpoint_file(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expected_config is not None and cfg != expected_config:
        raise ShapeMismatch(f"checkpoint config {cfg} differs from model config {expected_config}")
    model = FewShotSegNet(cfg, seed=None)
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    own = model.state_dict()
    for name, value in state.items():
        if name not in own or own[name].shape != value.shape:
            raise ShapeMismatch(f"parameter {name} has shape {tuple(value.shape)} in checkpoint")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CorruptCheckpoint(f"{path}: {exc}") from exc
    optimizer_state = None
    if "optimizer" in header:
        opt = header["optimizer"]
        optimizer_state = {
            "state": {
                int(idx): {key: torch.from_numpy(arrays[f"optim/{idx}/{key}"]) for key in keys}
                for idx, keys in opt["state_keys"].items()
            },
            "param_groups": opt["param_groups"],
        }
    return Checkpoint(model, cfg, optimizer_state, header.get("meta", {}))


def load_into(model: FewShotSegNet, path) -> Checkpoint:
    """Load checkpoint weights into an existing model; configs must agree."""
    ckpt = load_checkpoint(path, expected_config=model.cfg)
    model.load_state_dict(ckpt.model.state_dict())
    return ckpt


def load_encoder_weights(model: FewShotSegNet, path):
    """Initialise the encoder from externally supplied weights.

    Accepts a semifss checkpoint or a torch ``state_dict`` file whose conv tensors, in
    order, match the encoder's conv layers (e.g. the first layers of a VGG16).
    """
    path = Path(path)
    with path.open("rb") as fh:
        is_ckpt = fh.read(8) == MAGIC
    if is_ckpt:
        _, arrays = read_checkpoint_file(path)
        src = [torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/encoder.")]
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
        src = [v for v in state.values() if v.dim() in (1, 4)]
    dst = [p for p in model.encoder.parameters()]
    if len(src) < len(dst):
        raise ShapeMismatch(f"{path} supplies {len(src)} tensors, encoder needs {len(dst)}")
    with torch.no_grad():
        for p, v in zip(dst, src):
            if p.shape != v.shape:
                raise ShapeMismatch(f"encoder tensor {tuple(p.shape)} vs supplied {tuple(v.shape)}")
            p.copy_(v)
