"""The segmentation network and its checkpoint format.

Encoder: a stem convolution (3x3 + batch norm + relu) followed by three
downsampling residual multi-scale blocks and a bridge block. Decoder:
three stages, each bilinearly upsampling the deep feature to the matching
skip resolution, halving its channels with a 3x3 convolution, refining it
(EframBlock), gating the skip with a DframBlock fed by the pre-upsample
deep feature, concatenating, and fusing with another residual multi-scale
block. A 1x1 convolution plus sigmoid produces the per-pixel foreground
probability.

Channel ladder with base width b and 3 input channels:
stem b; encoders 2b, 4b, 8b; bridge 16b; decoder fusions 12b, 14b, 15b
producing 24b, 28b, 30b; head 30b -> 1.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .blocks import BatchNorm2d, Conv2d, DframBlock, EframBlock, RmsmBlock
from .engine import ops
from .engine.tensor import Tensor
from .errors import (CheckpointFormatError, CheckpointMismatchError,
                     CheckpointVersionError, ShapeError)
from .params import ParamStore

CHECKPOINT_MAGIC = b"RMSD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; serialized into every checkpoint."""

    in_channels: int = 3
    base_channels: int = 16
    reduce_ratio: int = 16
    efram_after_rmsm: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise CheckpointFormatError(f"unknown config fields {sorted(extra)}")
        return cls(**known)


class _DecoderStage:
    def __init__(self, store: ParamStore, name: str, rng, deep_ch: int,
                 skip_ch: int, cfg: NetworkConfig):
        half = deep_ch // 2
        self.halve = Conv2d(store, f"{name}.halve", rng, deep_ch, half, 3)
        self.dfram = DframBlock(store, f"{name}.dfram", rng, skip_ch, deep_ch,
                                cfg.reduce_ratio)
        self.rmsm = RmsmBlock(store, f"{name}.rmsm", rng, skip_ch + half,
                              downsample=False, bn_eps=cfg.bn_eps,
                              bn_momentum=cfg.bn_momentum)
        if cfg.efram_after_rmsm:
            self.efram = EframBlock(store, f"{name}.efram", rng,
                                    self.rmsm.out_channels, cfg.reduce_ratio)
        else:
            self.efram = EframBlock(store, f"{name}.efram", rng, half,
                                    cfg.reduce_ratio)
        self.out_channels = self.rmsm.out_channels


class Model:
    """The full network: parameter store plus the forward computation."""

    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        b = config.base_channels
        cin = config.in_channels

        self.stem_conv = Conv2d(self.store, "stem.conv", rng, cin, b, 3)
        self.stem_bn = BatchNorm2d(self.store, "stem.bn", b,
                                   config.bn_eps, config.bn_momentum)
        self.enc1 = RmsmBlock(self.store, "enc1", rng, b, downsample=True,
                              bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        self.enc2 = RmsmBlock(self.store, "enc2", rng, 2 * b, downsample=True,
                              bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        self.enc3 = RmsmBlock(self.store, "enc3", rng, 4 * b, downsample=True,
                              bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        self.bridge = RmsmBlock(self.store, "bridge", rng, 8 * b,
                                downsample=False, bn_eps=config.bn_eps,
                                bn_momentum=config.bn_momentum)
        self.decoder = []
        deep_ch = self.bridge.out_channels
        for i, skip_ch in enumerate((4 * b, 2 * b, b)):
            stage = _DecoderStage(self.store, f"dec{i + 1}", rng, deep_ch,
                                  skip_ch, config)
            self.decoder.append(stage)
            deep_ch = stage.out_channels
        self.head = Conv2d(self.store, "head", rng, deep_ch, 1, 1)

    # ------------------------------------------------------------------
    def forward(self, x: Tensor, training: bool = True,
                update_running: Optional[bool] = None) -> Tensor:
        """Map an input batch (B, in_channels, L, K) to probabilities (B, 1, L, K).

        update_running defaults to the training flag; pass False to keep
        a training-mode pass free of side effects (gradient checking).
        """
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} input channels; "
                f"got {x.shape[1]}"
            )
        stem = ops.relu(self.stem_bn(self.stem_conv(x), training, update_running))
        skips = [stem]
        feat = stem
        for enc in (self.enc1, self.enc2, self.enc3):
            feat = enc(feat, training, update_running)
            skips.append(feat)
        deep = self.bridge(feat, training, update_running)

        for i, stage in enumerate(self.decoder):
            skip = skips[2 - i]
            up = ops.bilinear_upsample(deep, skip.shape[2], skip.shape[3])
            halved = stage.halve(up)
            if not self.config.efram_after_rmsm:
                halved = stage.efram(halved)
            gated = stage.dfram(skip, deep)
            fused = stage.rmsm(ops.concat_channels([gated, halved]),
                               training, update_running)
            if self.config.efram_after_rmsm:
                fused = stage.efram(fused)
            deep = fused
        return ops.sigmoid(self.head(deep))

    __call__ = forward

    def n_parameters(self, trainable_only: bool = True) -> int:
        return self.store.n_scalars(trainable_only=trainable_only)

    def astype(self, dtype) -> "Model":
        """A new model with identical values in another dtype."""
        other = Model(self.config, seed=0, dtype=dtype)
        self.store.scaled_copy_into(other.store)
        return other


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# layout: magic "RMSD" | u32 version | u32 json_len | json (config + meta)
#         | u32 n_entries | entries | payloads
# entry:  u32 name_len | name utf-8 | u32 dtype_len | numpy dtype str
#         | u32 ndim | u32 dims...
# payloads follow in entry order as raw little-endian bytes.


def _w32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError("unexpected end of checkpoint file")
    return data


def _r32(f) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> None:
    """Write config, metadata, and every parameter and buffer to path."""
    blob = json.dumps(
        {"config": model.config.to_dict(), "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    entries = list(model.store.items())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _w32(f, CHECKPOINT_VERSION)
        _w32(f, len(blob))
        f.write(blob)
        _w32(f, len(entries))
        for name, tensor, _ in entries:
            nb = name.encode("utf-8")
            _w32(f, len(nb))
            f.write(nb)
            arr = tensor.data.astype("<f4") if tensor.dtype == np.float32 \
                else tensor.data.astype("<f8")
            ds = arr.dtype.str.encode("ascii")
            _w32(f, len(ds))
            f.write(ds)
            _w32(f, arr.ndim)
            for d in arr.shape:
                _w32(f, d)
        for name, tensor, _ in entries:
            arr = tensor.data.astype("<f4") if tensor.dtype == np.float32 \
                else tensor.data.astype("<f8")
            f.write(arr.tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[Model, dict]:
    """Rebuild the model stored at path; returns (model, meta).

    Raises CheckpointFormatError for damaged files,
    CheckpointVersionError for unknown versions, and
    CheckpointMismatchError when the stored parameters do not fit the
    stored configuration.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(
                f"not a checkpoint: bad magic {magic!r}"
            )
        version = _r32(f)
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {version}"
            )
        try:
            blob = json.loads(_read_exact(f, _r32(f)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"bad config blob: {exc}") from exc
        if not isinstance(blob, dict) or "config" not in blob:
            raise CheckpointFormatError("config blob missing 'config' object")
        config = NetworkConfig.from_dict(blob["config"])
        meta = blob.get("meta", {})

        n_entries = _r32(f)
        manifest = []
        for _ in range(n_entries):
            name = _read_exact(f, _r32(f)).decode("utf-8")
            dtype_str = _read_exact(f, _r32(f)).decode("ascii")
            try:
                entry_dtype = np.dtype(dtype_str)
            except TypeError as exc:
                raise CheckpointFormatError(
                    f"{name}: bad dtype {dtype_str!r}"
                ) from exc
            ndim = _r32(f)
            if ndim > 8:
                raise CheckpointFormatError(f"{name}: implausible rank {ndim}")
            dims = tuple(_r32(f) for _ in range(ndim))
            manifest.append((name, entry_dtype, dims))
        arrays = {}
        for name, entry_dtype, dims in manifest:
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(f, count * entry_dtype.itemsize)
            arrays[name] = np.frombuffer(raw, dtype=entry_dtype).reshape(dims)
        if f.read(1):
            raise CheckpointFormatError("trailing bytes after payloads")

    model = Model(config, seed=0, dtype=dtype)
    model.store.load_state(arrays)
    return model, meta
