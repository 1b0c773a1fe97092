"""Style-transfer network: 3D feature encoder, AdaIN and decoder.

The encoder is four conv+ReLU blocks (widths base*(1, 2, 4, 8)) with 2x max
pooling after the first three, so the deepest features sit at 1/8 of the
patch size. The decoder mirrors it with nearest upsampling and ends in a
linear conv to one channel.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    channel_stats,
    conv3d,
    maxpool3d,
    no_grad,
    relu,
    upsample_nearest3d,
)
from .autodiff.tensor import as_tensor
from .volume import PatchSpec, Volume, check_training_patch_size

ADAIN_EPS = 1e-5

FeaturePyramid = tuple  # (phi1, phi2, phi3, phi4), post-ReLU activations


def _conv_param(rng: np.random.Generator, name: str, cin: int, cout: int, gain: float) -> list[Parameter]:
    std = gain / np.sqrt(cin * 27)
    weight = Tensor(rng.normal(0.0, std, (cout, cin, 3, 3, 3)))
    return [Parameter(f"{name}.weight", weight), Parameter(f"{name}.bias", Tensor(np.zeros(cout)))]


class _Net:
    params: list[Parameter]

    def parameters(self) -> list[Parameter]:
        return list(self.params)

    def named(self) -> dict[str, Tensor]:
        return {p.name: p.tensor for p in self.params}

    def freeze(self) -> None:
        for p in self.params:
            p.tensor.requires_grad = False
            p.tensor.grad = None

    def unfreeze(self) -> None:
        for p in self.params:
            p.tensor.requires_grad = True

    def _w(self, i: int) -> tuple[Tensor, Tensor]:
        return self.params[2 * i].tensor, self.params[2 * i + 1].tensor


class Encoder(_Net):
    def __init__(self, base: int = 8, seed: int = 0):
        self.base = base
        self.widths = (1, base, 2 * base, 4 * base, 8 * base)
        rng = np.random.default_rng([seed, 1])
        self.params = []
        for k in range(4):
            self.params += _conv_param(rng, f"encoder.conv{k + 1}", self.widths[k], self.widths[k + 1], np.sqrt(2.0))

    def __call__(self, x: Tensor) -> FeaturePyramid:
        x = as_tensor(x)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"encoder expects (B, 1, s, s, s), got {x.shape}")
        if any(n % 8 for n in x.shape[2:]):
            raise ValueError(f"encoder input size must be divisible by 8, got {x.shape[2:]}")
        feats = []
        h = x
        for k in range(4):
            h = relu(conv3d(h, *self._w(k)))
            feats.append(h)
            if k < 3:
                h = maxpool3d(h)
        return tuple(feats)


class Decoder(_Net):
    def __init__(self, base: int = 8, seed: int = 0):
        self.base = base
        self.widths = (8 * base, 4 * base, 2 * base, base, 1)
        rng = np.random.default_rng([seed, 2])
        self.params = []
        for k in range(4):
            gain = np.sqrt(2.0) if k < 3 else 1.0
            self.params += _conv_param(rng, f"decoder.conv{k + 1}", self.widths[k], self.widths[k + 1], gain)

    def __call__(self, features: Tensor) -> Tensor:
        features = as_tensor(features)
        if features.ndim != 5 or features.shape[1] != self.widths[0]:
            raise ValueError(
                f"decoder expects {self.widths[0]} input channels, got shape {features.shape}"
            )
        h = features
        for k in range(3):
            h = upsample_nearest3d(relu(conv3d(h, *self._w(k))))
        return conv3d(h, *self._w(3))


def adain(content: Tensor, style: Tensor, eps: float = ADAIN_EPS) -> Tensor:
    """Give ``content`` the per-channel mean and std of ``style``."""
    content, style = as_tensor(content), as_tensor(style)
    if content.shape != style.shape:
        raise ValueError(f"adain shape mismatch: content {content.shape} vs style {style.shape}")
    mu_c, sd_c = channel_stats(content, eps)
    mu_s, sd_s = channel_stats(style, eps)
    bcast = content.shape[:2] + (1, 1, 1)
    normalized = (content - mu_c.reshape(bcast)) / sd_c.reshape(bcast)
    return normalized * sd_s.reshape(bcast) + mu_s.reshape(bcast)


@dataclass(frozen=True)
class ModelConfig:
    base: int = 8
    patch_size: int = 16
    lambda_style: float = 100.0
    lambda_content: float = 150.0
    lambda_consistency: float = 200.0

    def __post_init__(self):
        # persisted as f32 in checkpoints
        for name in ("lambda_style", "lambda_content", "lambda_consistency"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))


class HailModel:
    """Encoder + decoder pair; ``stylize`` is the phase-2 forward pass."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.encoder = Encoder(config.base, seed)
        self.decoder = Decoder(config.base, seed)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.tensor.data for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"checkpoint parameters do not match model: missing {missing}, extra {extra}")
        for name, arr in state.items():
            p = params[name]
            arr = np.asarray(arr, dtype=np.float32)
            if arr.size != p.tensor.size:
                raise ValueError(f"{name}: checkpoint has {arr.size} values, model needs {p.tensor.size}")
            p.tensor.data = arr.reshape(p.tensor.shape).copy()

    def reconstruct(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x)[3])

    def stylize(self, x: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
        """Harmonize patches ``x`` towards ``target``; returns (prediction, AdaIN features)."""
        with no_grad():
            fx = self.encoder(x)[3]
            ft = self.encoder(target)[3]
            mixed = adain(fx, ft)
        return self.decoder(mixed), mixed


# -- checkpoint format -------------------------------------------------------------------
CKPT_MAGIC = b"HCKP"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIBII3fI")
_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    phase: int
    config: ModelConfig
    params: dict[str, np.ndarray]

    def to_model(self) -> HailModel:
        model = HailModel(self.config)
        model.load_state(self.params)
        return model

    @classmethod
    def from_model(cls, model: HailModel, phase: int) -> "ModelCheckpoint":
        return cls(phase, model.config, {k: v.copy() for k, v in model.state().items()})


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    if ckpt.phase not in (1, 2):
        raise ValueError(f"phase must be 1 or 2, got {ckpt.phase}")
    c = ckpt.config
    parts = [
        _CKPT_HEAD.pack(
            CKPT_MAGIC,
            CKPT_VERSION,
            ckpt.phase,
            c.base,
            c.patch_size,
            c.lambda_style,
            c.lambda_content,
            c.lambda_consistency,
            len(ckpt.params),
        )
    ]
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        flat = np.asarray(arr, dtype="<f4").reshape(-1)
        parts += [_U16.pack(len(raw)), raw, _U64.pack(flat.size), flat.tobytes()]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> ModelCheckpoint:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic: not an HCKP file")
    if len(buf) < _CKPT_HEAD.size:
        raise CheckpointFormatError("truncated checkpoint header")
    _, version, phase, base, patch, ls, lc, lk, count = _CKPT_HEAD.unpack_from(buf, 0)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported HCKP version {version}")
    if phase not in (1, 2):
        raise CheckpointFormatError(f"invalid phase tag {phase}")
    pos = _CKPT_HEAD.size
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = _U16.unpack_from(buf, pos)
            pos += _U16.size
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (size,) = _U64.unpack_from(buf, pos)
            pos += _U64.size
            if pos + 4 * size > len(buf):
                raise CheckpointFormatError(f"truncated payload for parameter {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointFormatError("truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes after last parameter")
    return ModelCheckpoint(phase, ModelConfig(base, patch, ls, lc, lk), params)


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_model(path: str | os.PathLike) -> HailModel:
    return load_checkpoint(path).to_model()


# -- whole-volume inference -----------------------------------------------------------------
def _axis_starts(n: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def sliding_windows(dims: Sequence[int], patch: int, overlap: int) -> list[PatchSpec]:
    """Window grid covering the volume; the last window on each axis is flush
    with the far edge."""
    if not 0 <= overlap < patch:
        raise ValueError(f"overlap must be in [0, patch), got {overlap}")
    if any(n < patch for n in dims):
        raise ValueError(f"volume {tuple(dims)} is smaller than patch {patch}")
    stride = patch - overlap
    zs, ys, xs = (_axis_starts(n, patch, stride) for n in dims)
    return [PatchSpec((z, y, x), patch) for z in zs for y in ys for x in xs]


def _batched(items: Sequence, n: int) -> Iterable[Sequence]:
    for k in range(0, len(items), n):
        yield items[k : k + n]


def harmonize_volume(
    input_vol: Volume,
    target_exemplar: Volume,
    model: HailModel | None,
    patch: int | None = None,
    overlap: int | None = None,
    batch_size: int = 32,
) -> Volume:
    """Sliding-window harmonization of ``input_vol`` towards one exemplar.

    Each window of the input is stylized with the exemplar patch at the same
    location; overlapping predictions are averaged and clamped to [0, 1].
    """
    if model is None:
        raise ValueError("a trained model is required")
    if input_vol.dims != target_exemplar.dims:
        raise ValueError(
            f"input {input_vol.dims} and exemplar {target_exemplar.dims} differ; resample first"
        )
    patch = patch or model.config.patch_size
    check_training_patch_size(patch)
    overlap = patch // 2 if overlap is None else overlap
    specs = sliding_windows(input_vol.dims, patch, overlap)
    acc = np.zeros(input_vol.dims, dtype=np.float64)
    hits = np.zeros(input_vol.dims, dtype=np.int32)
    with no_grad():
        for group in _batched(specs, batch_size):
            xi = np.stack([input_vol.data[s.slices()] for s in group])[:, None]
            xt = np.stack([target_exemplar.data[s.slices()] for s in group])[:, None]
            pred, _ = model.stylize(Tensor(xi), Tensor(xt))
            for s, block in zip(group, pred.data[:, 0]):
                acc[s.slices()] += block
                hits[s.slices()] += 1
    out = np.clip(acc / hits, 0.0, 1.0)
    return Volume(out, input_vol.spacing, target_exemplar.site_id, input_vol.norm)


class Harmonizer:
    """Callable wrapper ``(input, exemplar) -> prediction`` for evaluation."""

    def __init__(self, model: HailModel, overlap: int | None = None, batch_size: int = 32):
        self.model = model
        self.overlap = overlap
        self.batch_size = batch_size

    def __call__(self, input_vol: Volume, exemplar: Volume) -> Volume:
        return harmonize_volume(input_vol, exemplar, self.model, overlap=self.overlap, batch_size=self.batch_size)
