"""Four-level U-Net and multiresolution U-Net (mrU-Net) builders.

Both variants share the contracting/expansive layout and parameter names.
mrU-Net adds, at every downsampled scale s in {2, 3, 4}, an auxiliary
branch: the input is average-pooled s-1 times, passed through two 3x3
conv + ReLU layers of the level's width and concatenated with the
max-pooled features entering level s.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import CompatibilityError, FormatError, ShapeError, ValidationError
from .tensor import (
    Tensor,
    avg_pool2x2,
    concat_channels,
    conv2d,
    max_pool2x2,
    relu,
    softmax_channels,
    transposed_conv2x2,
)

LEVELS = 4
OUT_CHANNELS = 2
MAGIC = b"MRUN"
FORMAT_VERSION = 1


class Variant(str, enum.Enum):
    UNET = "unet"
    MRUNET = "mrunet"


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: Variant = Variant.UNET
    base_channels: int = 8
    in_channels: int = 1
    levels: int = LEVELS
    out_channels: int = OUT_CHANNELS

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            raise ValidationError(f"unknown variant {self.variant!r}") from None
        if self.levels != LEVELS:
            raise ValidationError(f"only {LEVELS}-level networks are supported, got {self.levels}")
        if not isinstance(self.base_channels, int) or self.base_channels < 1:
            raise ValidationError(f"base_channels must be a positive integer, got {self.base_channels!r}")
        if self.in_channels not in (1, 3):
            raise ValidationError(f"in_channels must be 1 or 3, got {self.in_channels!r}")
        if self.out_channels != OUT_CHANNELS:
            raise ValidationError(f"out_channels is fixed at {OUT_CHANNELS}, got {self.out_channels}")

    def width(self, level: int) -> int:
        """Channel width of contracting level 1..4."""
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


def layer_layout(spec: ArchitectureSpec) -> List[Tuple[str, str, Tuple[int, ...]]]:
    """Ordered (layer name, kind, weight shape) for every parameterized layer.

    ``kind`` is "conv" (weight Cout, Cin, k, k) or "tconv" (Cin, Cout, 2, 2).
    """
    w = spec.width
    mr = spec.variant is Variant.MRUNET
    layers = []
    for lvl in range(1, LEVELS + 1):
        if mr and lvl > 1:
            layers.append((f"aux{lvl}.conv1", "conv", (w(lvl), spec.in_channels, 3, 3)))
            layers.append((f"aux{lvl}.conv2", "conv", (w(lvl), w(lvl), 3, 3)))
        if lvl == 1:
            cin = spec.in_channels
        else:
            cin = w(lvl - 1) + (w(lvl) if mr else 0)
        layers.append((f"enc{lvl}.conv1", "conv", (w(lvl), cin, 3, 3)))
        layers.append((f"enc{lvl}.conv2", "conv", (w(lvl), w(lvl), 3, 3)))
    for lvl in range(LEVELS - 1, 0, -1):
        layers.append((f"up{lvl}.tconv", "tconv", (w(lvl + 1), w(lvl), 2, 2)))
        layers.append((f"dec{lvl}.conv1", "conv", (w(lvl), 2 * w(lvl), 3, 3)))
        layers.append((f"dec{lvl}.conv2", "conv", (w(lvl), w(lvl), 3, 3)))
    layers.append(("final", "conv", (OUT_CHANNELS, w(1), 1, 1)))
    return layers


def parameter_shapes(spec: ArchitectureSpec) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for name, kind, wshape in layer_layout(spec):
        shapes[f"{name}.weight"] = wshape
        shapes[f"{name}.bias"] = (wshape[0] if kind == "conv" else wshape[1],)
    return shapes


class Model:
    """A network variant bound to its named parameters."""

    def __init__(self, spec: ArchitectureSpec, parameters: Dict[str, Tensor]):
        self.spec = spec
        self.parameters = parameters

    def __call__(self, batch: Tensor) -> Tensor:
        return forward(self, batch)

    @property
    def dtype(self):
        return next(iter(self.parameters.values())).dtype

    def named_parameters(self):
        return self.parameters.items()

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast to ``dtype``."""
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.parameters.items()}
        return Model(self.spec, params)

    def __repr__(self) -> str:
        return f"Model({self.spec.variant.value}, base={self.spec.base_channels}, params={param_count(self)})"


def build_model(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> Model:
    """He-normal initialised weights (std sqrt(2 / fan_in)), zero biases."""
    if not isinstance(spec, ArchitectureSpec):
        raise ValidationError("spec must be an ArchitectureSpec")
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, kind, wshape in layer_layout(spec):
        if kind == "conv":
            fan_in = wshape[1] * wshape[2] * wshape[3]
            nbias = wshape[0]
        else:
            # each output pixel of a 2x2/stride-2 transposed conv sees Cin inputs
            fan_in = wshape[0]
            nbias = wshape[1]
        weight = rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)
        params[f"{name}.weight"] = Tensor(weight.astype(dtype), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(nbias, dtype=dtype), requires_grad=True)
    return Model(spec, params)


def _conv_relu(p: Dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return relu(conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"]))


def forward(model: Model, batch: Tensor) -> Tensor:
    """Per-pixel two-class probability map, same H x W as the input."""
    spec, p = model.spec, model.parameters
    if batch.ndim != 4:
        raise ShapeError(f"batch must be (N, C, H, W), got shape {batch.shape}")
    n, c, h, w = batch.shape
    if c != spec.in_channels:
        raise ShapeError(f"model expects {spec.in_channels} input channels, got {c}")
    div = 2 ** (LEVELS - 1)
    if h % div or w % div:
        raise ShapeError(f"H and W must be divisible by {div}, got {h}x{w}")

    mr = spec.variant is Variant.MRUNET
    skips = []
    image = batch
    x = batch
    for lvl in range(1, LEVELS + 1):
        if lvl > 1:
            x = max_pool2x2(x)
            if mr:
                image = avg_pool2x2(image)
                aux = _conv_relu(p, f"aux{lvl}.conv1", image)
                aux = _conv_relu(p, f"aux{lvl}.conv2", aux)
                x = concat_channels(x, aux)
        x = _conv_relu(p, f"enc{lvl}.conv1", x)
        x = _conv_relu(p, f"enc{lvl}.conv2", x)
        skips.append(x)
    for lvl in range(LEVELS - 1, 0, -1):
        x = transposed_conv2x2(x, p[f"up{lvl}.tconv.weight"], p[f"up{lvl}.tconv.bias"])
        x = concat_channels(x, skips[lvl - 1])
        x = _conv_relu(p, f"dec{lvl}.conv1", x)
        x = _conv_relu(p, f"dec{lvl}.conv2", x)
    logits = conv2d(x, p["final.weight"], p["final.bias"])
    return softmax_channels(logits)


def param_count(model: Model) -> int:
    return int(sum(t.data.size for t in model.parameters.values()))


# ---------------------------------------------------------------------------
# checkpoint format: "MRUN" | u32 version | u32 count |
#   per tensor: u16 name_len, name utf-8, u8 rank, u32 dims..., f32 values


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(model.parameters)))
    for name, t in model.parameters.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_weights(model: Model, path) -> Path:
    path = Path(path)
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    """Decode a checkpoint into an ordered name -> float32 array mapping."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(data):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name in out:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            out[name] = arr.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return out


def load_weights(path, spec: ArchitectureSpec) -> Model:
    tensors = read_checkpoint(path)
    expected = parameter_shapes(spec)
    missing = [k for k in expected if k not in tensors]
    extra = [k for k in tensors if k not in expected]
    if missing or extra:
        raise CompatibilityError(
            f"checkpoint does not match {spec.variant.value} spec: missing={missing[:4]} extra={extra[:4]}"
        )
    params = {}
    for name, shape in expected.items():
        arr = tensors[name]
        if arr.shape != shape:
            raise CompatibilityError(f"{name}: checkpoint shape {arr.shape} != expected {shape}")
        params[name] = Tensor(arr, requires_grad=True)
    return Model(spec, params)


def infer_spec(path) -> ArchitectureSpec:
    """Recover the architecture spec from checkpoint names and shapes."""
    tensors = read_checkpoint(path)
    try:
        w = tensors["enc1.conv1.weight"]
    except KeyError:
        raise CompatibilityError(f"{path}: not a U-Net checkpoint") from None
    variant = Variant.MRUNET if "aux2.conv1.weight" in tensors else Variant.UNET
    return ArchitectureSpec(variant=variant, base_channels=int(w.shape[0]), in_channels=int(w.shape[1]))

