"""Toy-scale encoder/decoder producing per-query scores, boxes and states.

A frame image is cut into non-overlapping patches, linearly embedded with a
2-d sine positional code and refined by standard self-attention; the frame's
query set (variable track block first, fixed learnable detect block second)
runs through pre-norm decoder layers of self-attention, cross-attention to
the frame tokens and a feed-forward net. Sigmoid heads keep all class
probabilities and box coordinates strictly inside (0, 1). Query order is
slot identity: output row i always belongs to input query i.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

import querytrack.autodiff as ad
from querytrack.autodiff import ShapeError, Tensor
from querytrack.boxes import Box

__all__ = [
    "AttentionParams",
    "FramePredictions",
    "ModelConfig",
    "QueryRecord",
    "QuerySet",
    "TemporalAggregationParams",
    "TrackingModel",
    "empty_track_set",
    "load_checkpoint",
    "multi_head_attention",
    "save_checkpoint",
    "sine_positions_2d",
]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    n_channels: int = 1
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 3
    n_detect_queries: int = 16
    n_classes: int = 1
    ffn_dim: int = 128
    activation: str = "relu"
    positional_encoding: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 for the 2-d sine code")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.n_detect_queries < 1 or self.n_classes < 1:
            raise ValueError("need at least one detect query and one class")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class QueryRecord:
    """Bookkeeping for one query slot."""

    kind: str  # "detect" or "track"
    track_id: int | None = None
    disappear_count: int = 0

    def __post_init__(self):
        if self.kind not in ("detect", "track"):
            raise ValueError(f"unknown query kind {self.kind!r}")
        if (self.track_id is not None) != (self.kind == "track"):
            raise ValueError("track_id must be present exactly for track queries")
        if self.disappear_count < 0:
            raise ValueError("disappear_count must be nonnegative")


@dataclass
class QuerySet:
    """Ordered query slots: the track block (variable) then the detect block.

    Embedding row i belongs to record i. Track ids are unique within a set.
    """

    embeddings: Tensor
    records: list[QueryRecord]

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.records):
            raise ValueError(
                f"{self.embeddings.shape[0]} embedding rows for {len(self.records)} records"
            )
        seen_detect = False
        ids = []
        for r in self.records:
            if r.kind == "detect":
                seen_detect = True
            elif seen_detect:
                raise ValueError("track queries must precede the detect block")
            if r.track_id is not None:
                ids.append(r.track_id)
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate track ids in query set: {ids}")

    @property
    def n_track(self) -> int:
        return sum(1 for r in self.records if r.kind == "track")

    def track_ids(self) -> list[int]:
        return [r.track_id for r in self.records if r.kind == "track"]

    def __len__(self) -> int:
        return len(self.records)


def empty_track_set(d_model: int) -> QuerySet:
    return QuerySet(Tensor(np.zeros((0, d_model))), [])


@dataclass
class FramePredictions:
    """Per-query outputs of one decoded frame."""

    class_probs: Tensor  # [n, n_classes]
    boxes: Tensor  # [n, 4], (cx, cy, w, h)
    hidden: Tensor  # [n, d_model]
    n_track: int

    def scores(self) -> np.ndarray:
        """Best class probability per query."""
        return self.class_probs.data.max(axis=1)

    def box(self, slot: int) -> Box:
        return Box.from_array(self.boxes.data[slot])

    def box_list(self) -> list[Box]:
        return [Box.from_array(row) for row in self.boxes.data]

    def __len__(self) -> int:
        return self.class_probs.shape[0]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    norm_attn: NormParams
    ffn: FfnParams
    norm_ffn: NormParams


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    norm_self: NormParams
    cross_attn: AttentionParams
    norm_cross: NormParams
    ffn: FfnParams
    norm_ffn: NormParams


@dataclass
class TemporalAggregationParams:
    """One modified decoder layer that turns kept states into next queries."""

    attn: AttentionParams
    norm_in: NormParams
    ffn: FfnParams
    norm_ffn: NormParams


class _ParamFactory:
    """Creates named leaf tensors and collects them into a flat dict."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def linear(self, name: str, fan_in: int, fan_out: int, bias: float = 0.0):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = self.add(f"{name}.w", self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        b = self.add(f"{name}.b", np.full(fan_out, bias))
        return w, b

    def norm(self, name: str, d: int) -> NormParams:
        return NormParams(
            gain=self.add(f"{name}.gain", np.ones(d)),
            bias=self.add(f"{name}.bias", np.zeros(d)),
        )

    def attention(self, name: str, d: int) -> AttentionParams:
        wq, bq = self.linear(f"{name}.q", d, d)
        wk, bk = self.linear(f"{name}.k", d, d)
        wv, bv = self.linear(f"{name}.v", d, d)
        wo, bo = self.linear(f"{name}.out", d, d)
        return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo)

    def ffn(self, name: str, d: int, hidden: int) -> FfnParams:
        w1, b1 = self.linear(f"{name}.inner", d, hidden)
        w2, b2 = self.linear(f"{name}.outer", hidden, d)
        return FfnParams(w1, b1, w2, b2)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams, n_heads: int) -> Tensor:
    """Scaled dot-product attention with per-head column slices.

    Rows of the attention weights are a softmax, hence row-stochastic.
    """
    d = q.shape[1]
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    if k.shape[1] != d or v.shape[1] != d or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    dh = d // n_heads
    qp = _linear(q, p.wq, p.bq)
    kp = _linear(k, p.wk, p.bk)
    vp = _linear(v, p.wv, p.bv)
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qs = ad.slice_axis(qp, 1, lo, hi)
        ks = ad.slice_axis(kp, 1, lo, hi)
        vs = ad.slice_axis(vp, 1, lo, hi)
        logits = ad.scale(ad.matmul(qs, ad.transpose(ks)), 1.0 / np.sqrt(dh))
        heads.append(ad.matmul(ad.softmax(logits, axis=-1), vs))
    cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return _linear(cat, p.wo, p.bo)


def _ffn_forward(x: Tensor, p: FfnParams, kind: str) -> Tensor:
    return _linear(ad.activation(_linear(x, p.w1, p.b1), kind), p.w2, p.b2)


def _norm(x: Tensor, p: NormParams) -> Tensor:
    return ad.layer_norm(x, p.gain, p.bias)


def sine_positions_2d(n_rows: int, n_cols: int, d: int) -> np.ndarray:
    """Fixed 2-d sine/cosine code: half the channels per grid axis."""
    half = d // 2

    def axis_code(n: int) -> np.ndarray:
        pos = np.arange(n, dtype=np.float64)[:, None]
        freq = np.exp(np.arange(0, half, 2, dtype=np.float64) * (-np.log(10000.0) / half))
        code = np.zeros((n, half))
        code[:, 0::2] = np.sin(pos * freq)
        code[:, 1::2] = np.cos(pos * freq)
        return code

    rows = np.repeat(axis_code(n_rows), n_cols, axis=0)
    cols = np.tile(axis_code(n_cols), (n_rows, 1))
    return np.concatenate([rows, cols], axis=1)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class TrackingModel:
    """Owns all learnable parameters, including the temporal aggregation layer.

    Parameters are read-shared during inference; training updates them from a
    single worker.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        f = _ParamFactory(np.random.default_rng(seed))
        d, ffn = cfg.d_model, cfg.ffn_dim
        in_dim = cfg.patch_size * cfg.patch_size * cfg.n_channels

        self.patch_w, self.patch_b = f.linear("patch_embed", in_dim, d)
        self.encoder_layers = [
            EncoderLayerParams(
                attn=f.attention(f"encoder.{i}.attn", d),
                norm_attn=f.norm(f"encoder.{i}.norm_attn", d),
                ffn=f.ffn(f"encoder.{i}.ffn", d, ffn),
                norm_ffn=f.norm(f"encoder.{i}.norm_ffn", d),
            )
            for i in range(cfg.n_encoder_layers)
        ]
        self.decoder_layers = [
            DecoderLayerParams(
                self_attn=f.attention(f"decoder.{i}.self_attn", d),
                norm_self=f.norm(f"decoder.{i}.norm_self", d),
                cross_attn=f.attention(f"decoder.{i}.cross_attn", d),
                norm_cross=f.norm(f"decoder.{i}.norm_cross", d),
                ffn=f.ffn(f"decoder.{i}.ffn", d, ffn),
                norm_ffn=f.norm(f"decoder.{i}.norm_ffn", d),
            )
            for i in range(cfg.n_decoder_layers)
        ]
        self.norm_out = f.norm("decoder.norm_out", d)
        self.detect_queries = f.add(
            "detect_queries", f.rng.normal(0.0, 0.02, size=(cfg.n_detect_queries, d))
        )
        # negative class bias starts scores low so background dominates early
        self.cls_w, self.cls_b = f.linear("head.class", d, cfg.n_classes, bias=-2.0)
        self.box_w1, self.box_b1 = f.linear("head.box.inner", d, d)
        self.box_w2, self.box_b2 = f.linear("head.box.outer", d, 4)
        self.temporal = TemporalAggregationParams(
            attn=f.attention("temporal.attn", d),
            norm_in=f.norm("temporal.norm_in", d),
            ffn=f.ffn("temporal.ffn", d, ffn),
            norm_ffn=f.norm("temporal.norm_ffn", d),
        )
        self.params = f.params
        side = cfg.tokens_per_side
        self._pos = sine_positions_2d(side, side, d) if cfg.positional_encoding else None

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- encoding ----------------------------------------------------------

    def encode(self, image: Tensor) -> Tensor:
        """Image [H,W,C] -> frame tokens [T, d_model]."""
        cfg = self.cfg
        if image.shape != (cfg.image_size, cfg.image_size, cfg.n_channels):
            raise ShapeError(
                f"image shape {image.shape} != configured "
                f"({cfg.image_size}, {cfg.image_size}, {cfg.n_channels})"
            )
        x = _linear(ad.extract_patches(image, cfg.patch_size), self.patch_w, self.patch_b)
        if self._pos is not None:
            x = ad.add(x, Tensor(self._pos))
        for layer in self.encoder_layers:
            xn = _norm(x, layer.norm_attn)
            x = ad.add(x, multi_head_attention(xn, xn, xn, layer.attn, cfg.n_heads))
            x = ad.add(x, _ffn_forward(_norm(x, layer.norm_ffn), layer.ffn, cfg.activation))
        return x

    # -- decoding ----------------------------------------------------------

    def frame_queries(self, track_set: QuerySet | None = None) -> QuerySet:
        """Concatenate the carried track block with the learnable detect block."""
        detect_records = [QueryRecord("detect") for _ in range(self.cfg.n_detect_queries)]
        if track_set is None or len(track_set) == 0:
            return QuerySet(self.detect_queries, detect_records)
        return QuerySet(
            ad.concat([track_set.embeddings, self.detect_queries], axis=0),
            list(track_set.records) + detect_records,
        )

    def decode(self, queries: QuerySet, memory: Tensor) -> FramePredictions:
        """Refine queries against frame tokens; emit probabilities and boxes."""
        cfg = self.cfg
        if len(queries) == 0:
            raise ValueError("query set is empty; the detect block is mandatory")
        if memory.shape[1] != cfg.d_model:
            raise ShapeError(f"memory width {memory.shape[1]} != d_model {cfg.d_model}")
        x = queries.embeddings
        for layer in self.decoder_layers:
            xn = _norm(x, layer.norm_self)
            x = ad.add(x, multi_head_attention(xn, xn, xn, layer.self_attn, cfg.n_heads))
            x = ad.add(
                x,
                multi_head_attention(
                    _norm(x, layer.norm_cross), memory, memory, layer.cross_attn, cfg.n_heads
                ),
            )
            x = ad.add(x, _ffn_forward(_norm(x, layer.norm_ffn), layer.ffn, cfg.activation))
        hidden = _norm(x, self.norm_out)
        class_probs = ad.sigmoid(_linear(hidden, self.cls_w, self.cls_b))
        boxes = ad.sigmoid(
            _linear(ad.relu(_linear(hidden, self.box_w1, self.box_b1)), self.box_w2, self.box_b2)
        )
        return FramePredictions(class_probs, boxes, hidden, queries.n_track)

    def forward_frame(self, image: Tensor, track_set: QuerySet | None = None) -> FramePredictions:
        return self.decode(self.frame_queries(track_set), self.encode(image))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"QTCK"
_VERSION = 1


def save_checkpoint(path, model: TrackingModel, extra: dict | None = None) -> None:
    """Write config + named parameters to a deterministic binary container.

    Layout: magic, version, length-prefixed JSON header (config, extra
    metadata, parameter manifest in sorted name order), then raw float64
    little-endian parameter payloads in manifest order. Saving the same
    model twice yields byte-identical files.
    """
    manifest = []
    payloads = []
    for name in sorted(model.params):
        data = model.params[name].data
        manifest.append({"name": name, "shape": list(data.shape)})
        payloads.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    header = json.dumps(
        {
            "config": {f.name: getattr(model.cfg, f.name) for f in fields(model.cfg)},
            "extra": extra or {},
            "params": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> tuple[TrackingModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra metadata)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        model = TrackingModel(ModelConfig(**header["config"]))
        for entry in header["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in model.params:
                raise ValueError(f"{path}: unknown parameter {name}")
            n_bytes = int(np.prod(shape)) * 8
            data = np.frombuffer(fh.read(n_bytes), dtype="<f8").reshape(shape)
            if model.params[name].data.shape != data.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            # layer structs reference the same Tensor objects, so assigning
            # .data here updates the whole model
            model.params[name].data = data.astype(np.float64).copy()
    return model, header["extra"]
