"""Model variants, assembly, parameter counting, analytic FLOPs, and
weight-file serialization.

Five variants share three Conv3D blocks (Conv3D+LeakyReLU, MaxPool3D,
Dropout 0.25):

  baseline  blocks -> global spatial pool -> flatten -> Dense(64)
            -> Dropout(0.5) -> Dense(1, sigmoid)
  m1        motion channel input (Cin=2), blocks -> ConvLSTM (sequence)
            -> pool -> general attention -> dense head
  m2        spatial/temporal/feature attention after blocks 1/2/3
            -> BiConvLSTM -> pool -> general attention -> dense head
  m3        m2 with a unidirectional ConvLSTM
  m4        baseline with multi-head self-attention after block 3

The "paper" preset mirrors the published 256x256 topology; the "desk"
preset shrinks extents and widths so training and gradient checking run
in minutes on a CPU while exercising every mechanism.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from . import layers as ly
from . import recurrent as rc
from .autodiff import ShapeError, Tensor, no_grad, reshape

VARIANTS = ("baseline", "m1", "m2", "m3", "m4")

CONV_DROPOUT = 0.25
DENSE_DROPOUT = 0.5
WEIGHT_MAGIC = b"TFWT"
WEIGHT_VERSION = 1


class WeightFileError(Exception):
    """Base class for weight-file problems."""


class WeightMagicError(WeightFileError):
    pass


class WeightVersionError(WeightFileError):
    pass


class SpecHashError(WeightFileError):
    pass


class WeightTruncatedError(WeightFileError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    frames: int = 10
    height: int = 256
    width: int = 256
    widths: tuple[int, int, int] = (32, 64, 128)
    recurrent_filters: int = 64
    reduction: int = 32
    heads: int = 2
    key_dim: int = 128
    dense_units: int = 64
    motion: bool = False
    scale: str = "paper"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.motion != (self.variant == "m1"):
            raise ValueError(
                f"motion channel is exclusive to m1 (got variant={self.variant!r}, motion={self.motion})"
            )
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"widths must be three positive extents, got {self.widths}")
        if self.variant in ("m2", "m3") and self.widths[2] % self.reduction != 0:
            raise ValueError(f"reduction {self.reduction} does not divide block-3 width {self.widths[2]}")
        if self.height % 8 or self.width % 8:
            raise ValueError(f"input extents must survive three 2x poolings, got {self.height}x{self.width}")

    @property
    def cin(self) -> int:
        return 2 if self.motion else 1

    @classmethod
    def paper(cls, variant: str) -> "ModelSpec":
        return cls(variant=variant, motion=variant == "m1", scale="paper")

    @classmethod
    def desk(cls, variant: str) -> "ModelSpec":
        return cls(
            variant=variant,
            height=32,
            width=32,
            widths=(8, 16, 32),
            recurrent_filters=16,
            key_dim=16,
            motion=variant == "m1",
            scale="desk",
        )

    @classmethod
    def preset(cls, variant: str, scale: str) -> "ModelSpec":
        if scale == "paper":
            return cls.paper(variant)
        if scale == "desk":
            return cls.desk(variant)
        raise ValueError(f"unknown scale preset {scale!r}")

    def canonical(self) -> str:
        fields = {
            "variant": self.variant,
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "widths": ",".join(str(w) for w in self.widths),
            "recurrent_filters": self.recurrent_filters,
            "reduction": self.reduction,
            "heads": self.heads,
            "key_dim": self.key_dim,
            "dense_units": self.dense_units,
            "motion": int(self.motion),
        }
        return "\n".join(f"{k}={fields[k]}" for k in sorted(fields))

    def spec_hash(self) -> int:
        digest = hashlib.sha256(self.canonical().encode()).digest()
        return int.from_bytes(digest[:8], "little")


class Model:
    """A built variant: layer objects plus a flat named parameter registry."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        c1, c2, c3 = spec.widths
        mk = lambda cin, cout: ly.Conv3DLayer(cin, cout, activation="leaky_relu", rng=rng, dtype=dtype)
        self.conv1 = mk(spec.cin, c1)
        self.conv2 = mk(c1, c2)
        self.conv3 = mk(c2, c3)

        self.feature_attn = None
        self.self_attn = None
        self.rnn = None
        self.rnn_fwd = None
        self.rnn_bwd = None
        self.general_attn = None

        head_in = spec.frames * c3
        if spec.variant in ("m2", "m3"):
            self.feature_attn = attn.FeatureAttentionParams(c3, spec.reduction, rng=rng, dtype=dtype)
        if spec.variant == "m4":
            self.self_attn = attn.SelfAttentionParams(c3, spec.heads, spec.key_dim, rng=rng, dtype=dtype)
        if spec.variant in ("m1", "m3"):
            self.rnn = rc.ConvLSTMParams(c3, spec.recurrent_filters, rng=rng, dtype=dtype)
            head_in = spec.recurrent_filters
        if spec.variant == "m2":
            self.rnn_fwd = rc.ConvLSTMParams(c3, spec.recurrent_filters, rng=rng, dtype=dtype)
            self.rnn_bwd = rc.ConvLSTMParams(c3, spec.recurrent_filters, rng=rng, dtype=dtype)
            head_in = 2 * spec.recurrent_filters
        if spec.variant in ("m1", "m2", "m3"):
            self.general_attn = attn.GeneralAttentionParams(head_in, rng=rng, dtype=dtype)

        self.dense1 = ly.DenseLayer(head_in, spec.dense_units, rng=rng, dtype=dtype)
        self.dense2 = ly.DenseLayer(spec.dense_units, 1, activation="sigmoid", rng=rng, dtype=dtype)

        self.params = self._collect_params()

    def _collect_params(self) -> dict[str, Tensor]:
        groups = {
            "conv1": self.conv1,
            "conv2": self.conv2,
            "conv3": self.conv3,
            "feature_attn": self.feature_attn,
            "self_attn": self.self_attn,
            "rnn": self.rnn,
            "rnn_fwd": self.rnn_fwd,
            "rnn_bwd": self.rnn_bwd,
            "general_attn": self.general_attn,
            "dense1": self.dense1,
            "dense2": self.dense2,
        }
        out: dict[str, Tensor] = {}
        for prefix, obj in groups.items():
            if obj is None:
                continue
            for key, tensor in obj.params().items():
                name = f"{prefix}.{key}"
                tensor.name = name
                out[name] = tensor
        return out

    # -- forward ---------------------------------------------------------

    def forward(self, x, mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        spec = self.spec
        expected = (spec.frames, spec.height, spec.width, spec.cin)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError(f"input {x.shape} does not match spec extents (B,)+{expected}")
        if mode == "infer":
            with no_grad():
                return self._forward(x, mode, rng)
        return self._forward(x, mode, rng)

    def _forward(self, x: Tensor, mode: str, rng) -> Tensor:
        spec = self.spec
        variant = spec.variant
        b = x.shape[0]

        h = ly.dropout(ly.maxpool3d(self.conv1(x)), CONV_DROPOUT, mode, rng)
        if variant in ("m2", "m3"):
            h = attn.spatial_attention(h)
        h = ly.dropout(ly.maxpool3d(self.conv2(h)), CONV_DROPOUT, mode, rng)
        if variant in ("m2", "m3"):
            h = attn.temporal_attention(h)
        h = ly.dropout(ly.maxpool3d(self.conv3(h)), CONV_DROPOUT, mode, rng)
        if variant in ("m2", "m3"):
            h = attn.feature_attention(h, self.feature_attn)
        if variant == "m4":
            h = attn.self_attention(h, self.self_attn)

        if variant in ("m1", "m3"):
            h = rc.convlstm_sequence(h, self.rnn, return_sequence=True)
        elif variant == "m2":
            h = rc.biconvlstm(h, self.rnn_fwd, self.rnn_bwd)

        pooled = ly.global_spatial_pool(h)
        if variant in ("baseline", "m4"):
            z = self.dense1(reshape(pooled, (b, spec.frames * spec.widths[2])))
        else:
            z = self.dense1(attn.general_attention(pooled, self.general_attn))
        z = ly.dropout(z, DENSE_DROPOUT, mode, rng)
        return self.dense2(z)

    def __call__(self, x, mode: str = "infer", rng=None) -> Tensor:
        return self.forward(x, mode, rng)

    def count_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            self.params[name].data = arr.astype(self.dtype).copy()


def build(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> Model:
    return Model(spec, rng, dtype)


# -- shape plan ---------------------------------------------------------------


def shape_plan(spec: ModelSpec, batch: int = 16) -> list[tuple[str, tuple[int, ...]]]:
    """Per-stage output shapes without running any data."""
    t = spec.frames
    h, w = spec.height, spec.width
    rows: list[tuple[str, tuple[int, ...]]] = [("input", (batch, t, h, w, spec.cin))]
    for i, c in enumerate(spec.widths, start=1):
        rows.append((f"conv{i}", (batch, t, h, w, c)))
        h //= 2
        w //= 2
        rows.append((f"maxpool{i}", (batch, t, h, w, c)))
        rows.append((f"dropout{i}", (batch, t, h, w, c)))
        if spec.variant in ("m2", "m3") and i == 1:
            rows.append(("spatial_attention", (batch, t, h, w, c)))
        if spec.variant in ("m2", "m3") and i == 2:
            rows.append(("temporal_attention", (batch, t, h, w, c)))
    c3 = spec.widths[2]
    if spec.variant in ("m2", "m3"):
        rows.append(("feature_attention", (batch, t, h, w, c3)))
    if spec.variant == "m4":
        rows.append(("self_attention", (batch, t, h, w, c3)))
    head_c = c3
    if spec.variant in ("m1", "m3"):
        head_c = spec.recurrent_filters
        rows.append(("convlstm", (batch, t, h, w, head_c)))
    elif spec.variant == "m2":
        head_c = 2 * spec.recurrent_filters
        rows.append(("biconvlstm", (batch, t, h, w, head_c)))
    rows.append(("global_spatial_pool", (batch, t, head_c)))
    if spec.variant in ("baseline", "m4"):
        rows.append(("flatten", (batch, t * head_c)))
    else:
        rows.append(("general_attention", (batch, head_c)))
    rows.append(("dense1", (batch, spec.dense_units)))
    rows.append(("dropout_dense", (batch, spec.dense_units)))
    rows.append(("dense2", (batch, 1)))
    return rows


# -- analytic FLOPs -----------------------------------------------------------


def estimate_flops(model_or_spec) -> float:
    """Floating-point operations per single 10-frame sample, with one
    multiply-add counted as 2 FLOPs and pooling/activations at 1 FLOP per
    output element."""
    spec = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    t = spec.frames
    h, w = spec.height, spec.width
    total = 0.0
    prev_c = spec.cin
    kt = kh = kw = 3
    for i, c in enumerate(spec.widths, start=1):
        total += 2.0 * kt * kh * kw * prev_c * c * t * h * w  # conv MACs
        total += 2.0 * t * h * w * c  # bias add + LeakyReLU
        h //= 2
        w //= 2
        total += 1.0 * t * h * w * c  # max pooling outputs
        prev_c = c
        if spec.variant in ("m2", "m3") and i == 1:
            total += _gate_attention_flops(t, h, w, c, over="spatial")
        if spec.variant in ("m2", "m3") and i == 2:
            total += _gate_attention_flops(t, h, w, c, over="temporal")
    c3 = spec.widths[2]
    if spec.variant in ("m2", "m3"):
        total += _feature_attention_flops(t, h, w, c3, spec.reduction)
    if spec.variant == "m4":
        total += _self_attention_flops(t, h, w, c3, spec.heads, spec.key_dim)

    head_c = c3
    if spec.variant in ("m1", "m3"):
        total += _convlstm_flops(t, h, w, c3, spec.recurrent_filters)
        head_c = spec.recurrent_filters
    elif spec.variant == "m2":
        total += 2.0 * _convlstm_flops(t, h, w, c3, spec.recurrent_filters)
        head_c = 2 * spec.recurrent_filters

    total += 1.0 * t * head_c  # global spatial pool outputs
    if spec.variant in ("baseline", "m4"):
        head_in = t * head_c
    else:
        total += _general_attention_flops(t, head_c)
        head_in = head_c
    total += 2.0 * head_in * spec.dense_units + spec.dense_units
    total += 2.0 * spec.dense_units * 1 + 1 + 1  # output dense, bias, sigmoid
    return total


def _gate_attention_flops(t, h, w, c, over: str) -> float:
    elems = t * h * w * c
    gate = h * w if over == "spatial" else t * c
    return 1.0 * elems + 1.0 * gate + 1.0 * elems  # mean adds + sigmoid + rescale


def _feature_attention_flops(t, h, w, c, reduction) -> float:
    hidden = c // reduction
    elems = t * h * w * c
    mlp = 2.0 * c * hidden + hidden + hidden + 2.0 * hidden * c + c + c
    return 1.0 * elems + mlp + 1.0 * elems


def _self_attention_flops(t, h, w, c, heads, dk) -> float:
    n = t * h * w
    wide = heads * dk
    proj = 3 * 2.0 * n * c * wide
    scores = heads * 2.0 * n * n * dk
    softmax_cost = heads * 3.0 * n * n
    context = heads * 2.0 * n * n * dk
    out = 2.0 * n * wide * c
    return proj + scores + softmax_cost + context + out


def _convlstm_flops(t, h, w, cin, filters) -> float:
    gates = 4 * filters
    per_step = 2.0 * 9 * cin * gates * h * w + 2.0 * 9 * filters * gates * h * w
    per_step += 1.0 * gates * h * w  # bias adds
    per_step += 13.0 * h * w * filters  # gate activations and state pointwise math
    return t * per_step


def _general_attention_flops(n, c) -> float:
    return 2.0 * n * c + n + 3.0 * n + 2.0 * n * c


# -- serialization ------------------------------------------------------------


def save_weights(model: Model, path) -> None:
    """TFWT format: magic, u16 version, u64 spec hash, u32 tensor count,
    then per-tensor records (u16 name length, name, u8 rank, u32 extents,
    little-endian float32 values)."""
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<H", WEIGHT_VERSION))
        fh.write(struct.pack("<Q", model.spec.spec_hash()))
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            tensor = model.params[name]
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tensor.ndim))
            for extent in tensor.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise WeightTruncatedError(f"weight file truncated while reading {what}")
    return buf


def load_weights(spec: ModelSpec, path, dtype=np.float32) -> Model:
    """Build a model for `spec` and load parameters saved by save_weights.

    The file's spec hash must match; magic/version/hash problems and
    truncation raise distinct error types.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != WEIGHT_MAGIC:
            raise WeightMagicError(f"bad magic {magic!r}; not a TFWT weight file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != WEIGHT_VERSION:
            raise WeightVersionError(f"unsupported weight file version {version}")
        (file_hash,) = struct.unpack("<Q", _read_exact(fh, 8, "spec hash"))
        if file_hash != spec.spec_hash():
            raise SpecHashError(
                f"weight file spec hash {file_hash:#018x} does not match "
                f"{spec.variant}/{spec.scale} spec {spec.spec_hash():#018x}"
            )
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        model = build(spec, np.random.default_rng(0), dtype=dtype)
        if count != len(model.params):
            raise WeightFileError(f"weight file has {count} tensors, model needs {len(model.params)}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode()
            if name not in model.params:
                raise WeightFileError(f"unexpected tensor {name!r} in weight file")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            extents = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
            target = model.params[name]
            if extents != target.shape:
                raise WeightFileError(f"tensor {name!r} has extents {extents}, expected {target.shape}")
            numel = int(np.prod(extents))
            raw = _read_exact(fh, 4 * numel, f"values of {name!r}")
            values = np.frombuffer(raw, dtype="<f4").reshape(extents)
            target.data = values.astype(dtype)
        trailing = fh.read(1)
        if trailing:
            raise WeightFileError("trailing bytes after final tensor record")
    return model
