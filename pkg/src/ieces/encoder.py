"""Convolutional encoder mapping a 3x48x48 sign image to a real feature code.

Three stages:

* stem: two same-padded 3x3 convolutions, then a 2x2 stride-1 max pool on a
  zero-filled border so the maps keep the input resolution;
* inception block: four parallel branches (1x1; 1x1 -> 1x3 -> 3x1;
  1x1 -> 1x7 -> 7x1; 3x3 max pool -> 1x1) concatenated on channels;
* head: three stride-2 pools interleaved with two 3x3 convolutions, then a
  linear map to the code.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (3, 48, 48)
    stem_widths: tuple[int, int] = (16, 32)
    inception_widths: tuple[int, int, int, int] = (16, 16, 16, 16)
    head_widths: tuple[int, int] = (96, 128)
    code_length: int = 256

    def __post_init__(self):
        widths = (*self.input_shape, *self.stem_widths, *self.inception_widths, *self.head_widths)
        if len(self.input_shape) != 3 or len(self.stem_widths) != 2 or len(self.inception_widths) != 4 \
                or len(self.head_widths) != 2:
            raise ValueError("encoder config has the wrong number of widths")
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"all encoder widths must be positive, got {self}")
        if self.code_length < 1:
            raise ValueError(f"code length must be >= 1, got {self.code_length}")
        if min(self.input_shape[1:]) < 8:
            raise ValueError("input must be at least 8x8 to survive three stride-2 pools")

    @property
    def flat_size(self) -> int:
        h, w = self.input_shape[1:]
        for _ in range(3):
            h, w = h // 2, w // 2
        return self.head_widths[1] * h * w

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Declared shape of every named encoder parameter, in build order."""
    c_in = config.input_shape[0]
    s1, s2 = config.stem_widths
    b1, b2, b3, b4 = config.inception_widths
    h1, h2 = config.head_widths
    convs = {
        "stem.conv1": (s1, c_in, 3, 3),
        "stem.conv2": (s2, s1, 3, 3),
        "inception.b1.conv1x1": (b1, s2, 1, 1),
        "inception.b2.conv1x1": (b2, s2, 1, 1),
        "inception.b2.conv1x3": (b2, b2, 1, 3),
        "inception.b2.conv3x1": (b2, b2, 3, 1),
        "inception.b3.conv1x1": (b3, s2, 1, 1),
        "inception.b3.conv1x7": (b3, b3, 1, 7),
        "inception.b3.conv7x1": (b3, b3, 7, 1),
        "inception.b4.conv1x1": (b4, s2, 1, 1),
        "head.conv1": (h1, b1 + b2 + b3 + b4, 3, 3),
        "head.conv2": (h2, h1, 3, 3),
    }
    shapes: dict[str, tuple[int, ...]] = {}
    for name, shape in convs.items():
        shapes[f"{name}.weight"] = shape
        shapes[f"{name}.bias"] = (shape[0],)
    shapes["head.fc.weight"] = (config.code_length, config.flat_size)
    shapes["head.fc.bias"] = (config.code_length,)
    return shapes


def fan_in_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype) -> np.ndarray:
    """Uniform in [-a, a] with a = sqrt(6 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_encoder(config: EncoderConfig | None = None, seed=0, dtype=None) -> EncoderParams:
    config = config or EncoderConfig()
    dtype = np.dtype(dtype or T.get_default_dtype())
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        data = np.zeros(shape, dtype=dtype) if name.endswith(".bias") else fan_in_uniform(shape, rng, dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderParams(config, tensors)


def param_count(params) -> int:
    """Total number of scalars over a parameter set (EncoderParams or any name -> tensor map)."""
    tensors = params.tensors if isinstance(params, EncoderParams) else params
    return int(sum(np.prod(t.shape, dtype=np.int64) for t in tensors.values()))


def _conv(x: Tensor, p: EncoderParams, name: str, padding) -> Tensor:
    return T.relu(T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], 1, padding))


class EncodeTrace:
    """Counts images pushed through the encoder, split by branch role."""

    def __init__(self):
        self.counts = {"sample": 0, "template": 0}

    def record(self, role: str, n: int) -> None:
        self.counts[role] = self.counts.get(role, 0) + n

    @property
    def sample_passes(self) -> int:
        return self.counts.get("sample", 0)

    @property
    def template_passes(self) -> int:
        return self.counts.get("template", 0)


def encode(params: EncoderParams, images, trace: EncodeTrace | None = None, role: str = "sample") -> Tensor:
    """Feature code(s) for one ``3x48x48`` image or a batch ``N x 3 x 48 x 48``.

    Returns a ``code_length`` vector, or ``N x code_length`` for a batch.
    """
    cfg = params.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=params.dtype)
    if x.dtype != params.dtype:
        x = Tensor(x.data, dtype=params.dtype, requires_grad=x.requires_grad) if not x._parents else x
    single = x.ndim == 3
    if x.shape[-3:] != tuple(cfg.input_shape) or x.ndim not in (3, 4):
        raise ValueError(f"encoder expects images of shape {tuple(cfg.input_shape)}, got {x.shape}")
    if single:
        x = x.reshape((1,) + x.shape)
    n = x.shape[0]
    if trace is not None:
        trace.record(role, n)
    h, w = cfg.input_shape[1:]

    # stem
    x = _conv(x, params, "stem.conv1", 1)
    x = _conv(x, params, "stem.conv2", 1)
    x = T.maxpool2d(T.zero_pad(x, (h + 1, w + 1)), 2, 1)

    # inception block
    b1 = _conv(x, params, "inception.b1.conv1x1", 0)
    b2 = _conv(x, params, "inception.b2.conv1x1", 0)
    b2 = _conv(b2, params, "inception.b2.conv1x3", (0, 1))
    b2 = _conv(b2, params, "inception.b2.conv3x1", (1, 0))
    b3 = _conv(x, params, "inception.b3.conv1x1", 0)
    b3 = _conv(b3, params, "inception.b3.conv1x7", (0, 3))
    b3 = _conv(b3, params, "inception.b3.conv7x1", (3, 0))
    b4 = T.maxpool2d(x, 3, 1, 1)
    b4 = _conv(b4, params, "inception.b4.conv1x1", 0)
    x = T.concat_channels([b1, b2, b3, b4])

    # head
    x = T.maxpool2d(x, 2, 2)
    x = _conv(x, params, "head.conv1", 1)
    x = T.maxpool2d(x, 2, 2)
    x = _conv(x, params, "head.conv2", 1)
    x = T.maxpool2d(x, 2, 2)
    x = x.reshape((n, -1))
    code = T.linear(x, params["head.fc.weight"], params["head.fc.bias"])
    return code.reshape((cfg.code_length,)) if single else code


def encode_batched(params: EncoderParams, images: np.ndarray, batch_size: int = 128,
                   trace: EncodeTrace | None = None, role: str = "sample") -> np.ndarray:
    """Gradient-free encoding of many images in chunks; returns a plain array."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(encode(params, images[start:start + batch_size], trace, role).data)
    if not out:
        return np.zeros((0, params.config.code_length), dtype=params.dtype)
    return np.concatenate(out)
