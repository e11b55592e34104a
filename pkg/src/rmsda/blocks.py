"""Network building blocks.

RmsmBlock is the residual multi-scale unit used by the encoder, bridge
and decoder. EframBlock and DframBlock are the two attention units: the
first refines a single feature map against itself, the second refines an
encoder skip using channel context from the deeper decoder feature plus a
joint spatial map.
"""
from __future__ import annotations

import numpy as np

from .engine import ops
from .engine.tensor import Tensor
from .params import ParamStore, he_uniform

SPATIAL_KERNELS = (3, 5, 7, 9)


class Conv2d:
    """Convolution parameters bound to a store entry pair (weight, bias)."""

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator,
                 in_ch: int, out_ch: int, k: int, stride: int = 1):
        fan_in = in_ch * k * k
        self.w = store.param(f"{name}.w",
                             he_uniform(rng, (out_ch, in_ch, k, k), fan_in,
                                        store.dtype))
        self.b = store.param(f"{name}.b",
                             np.zeros((1, out_ch, 1, 1), dtype=store.dtype))
        self.stride = stride
        self.out_channels = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, self.stride)


class BatchNorm2d:
    """Batch-norm parameters: gamma/beta trainable, running stats as buffers."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 eps: float, momentum: float):
        shape = (1, channels, 1, 1)
        self.gamma = store.param(f"{name}.gamma", np.ones(shape, store.dtype))
        self.beta = store.param(f"{name}.beta", np.zeros(shape, store.dtype))
        self.running_mean = store.buffer(f"{name}.running_mean",
                                         np.zeros(shape, store.dtype))
        self.running_var = store.buffer(f"{name}.running_var",
                                        np.ones(shape, store.dtype))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool,
                 update_running=None) -> Tensor:
        return ops.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum, training=training,
            update_running=update_running,
        )


class DenseLayer:
    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator,
                 in_ch: int, out_ch: int):
        self.w = store.param(f"{name}.w",
                             he_uniform(rng, (out_ch, in_ch, 1, 1), in_ch,
                                        store.dtype))
        self.b = store.param(f"{name}.b",
                             np.zeros((1, out_ch, 1, 1), dtype=store.dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w, self.b)


class RmsmBlock:
    """Residual multi-scale block; output has exactly twice the input channels.

    Three parallel convolutions (1x1, 3x3, 5x5), each batch-normalized,
    are concatenated and fused by a 1x1 bottleneck back to the input
    width. The input itself is concatenated in front of the fused map, so
    out = concat(residual, fused). No activation inside the block. With
    downsample=True the bottleneck runs at stride 2 and the residual path
    is 2x2 average-pooled to match.
    """

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator,
                 in_ch: int, downsample: bool = False,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        self.conv1 = Conv2d(store, f"{name}.conv1", rng, in_ch, in_ch, 1)
        self.bn1 = BatchNorm2d(store, f"{name}.bn1", in_ch, bn_eps, bn_momentum)
        self.conv3 = Conv2d(store, f"{name}.conv3", rng, in_ch, in_ch, 3)
        self.bn3 = BatchNorm2d(store, f"{name}.bn3", in_ch, bn_eps, bn_momentum)
        self.conv5 = Conv2d(store, f"{name}.conv5", rng, in_ch, in_ch, 5)
        self.bn5 = BatchNorm2d(store, f"{name}.bn5", in_ch, bn_eps, bn_momentum)
        self.bottleneck = Conv2d(store, f"{name}.bottleneck", rng,
                                 3 * in_ch, in_ch, 1,
                                 stride=2 if downsample else 1)
        self.downsample = downsample
        self.in_channels = in_ch
        self.out_channels = 2 * in_ch

    def __call__(self, x: Tensor, training: bool = True,
                 update_running=None) -> Tensor:
        b1 = self.bn1(self.conv1(x), training, update_running)
        b3 = self.bn3(self.conv3(x), training, update_running)
        b5 = self.bn5(self.conv5(x), training, update_running)
        fused = self.bottleneck(ops.concat_channels([b1, b3, b5]))
        residual = ops.avg_pool2x2(x) if self.downsample else x
        return ops.concat_channels([residual, fused])


class EframBlock:
    """Self-attention refinement of a single feature map.

    Channel gate: GAP -> dense(N -> max(1, N/r)) -> relu -> dense(-> N)
    -> sigmoid. Spatial gate: 1x1 squeeze to max(1, N/r) channels, four
    parallel single-output convolutions (3, 5, 7, 9) summed, sigmoid.
    Output is x * channel_gate * spatial_gate.
    """

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator,
                 channels: int, ratio: int = 16):
        hidden = max(1, channels // ratio)
        squeezed = max(1, channels // ratio)
        self.fc1 = DenseLayer(store, f"{name}.fc1", rng, channels, hidden)
        self.fc2 = DenseLayer(store, f"{name}.fc2", rng, hidden, channels)
        self.squeeze = Conv2d(store, f"{name}.squeeze", rng, channels, squeezed, 1)
        self.spatial = [
            Conv2d(store, f"{name}.sp{k}", rng, squeezed, 1, k)
            for k in SPATIAL_KERNELS
        ]
        self.channels = channels

    def __call__(self, x: Tensor) -> Tensor:
        ch = ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(x)))))
        sq = self.squeeze(x)
        acc = self.spatial[0](sq)
        for conv in self.spatial[1:]:
            acc = ops.add(acc, conv(sq))
        sp = ops.sigmoid(acc)
        return ops.mul(ops.mul(x, ch), sp)


class DframBlock:
    """Skip refinement driven by the deeper decoder feature.

    The channel gate is computed from the deep feature (GAP -> MLP with
    hidden max(1, deep/r) -> skip channels -> sigmoid). The spatial gate
    squeezes both maps to max(1, N/r) channels with 1x1 convolutions,
    bilinearly upsamples the deep one to the skip resolution, concatenates,
    and sums four single-output convolutions (3, 5, 7, 9) before the
    sigmoid. Output is skip * channel_gate * spatial_gate.
    """

    def __init__(self, store: ParamStore, name: str, rng: np.random.Generator,
                 skip_ch: int, deep_ch: int, ratio: int = 16):
        hidden = max(1, deep_ch // ratio)
        sq_s = max(1, skip_ch // ratio)
        sq_d = max(1, deep_ch // ratio)
        self.fc1 = DenseLayer(store, f"{name}.fc1", rng, deep_ch, hidden)
        self.fc2 = DenseLayer(store, f"{name}.fc2", rng, hidden, skip_ch)
        self.squeeze_skip = Conv2d(store, f"{name}.squeeze_skip", rng,
                                   skip_ch, sq_s, 1)
        self.squeeze_deep = Conv2d(store, f"{name}.squeeze_deep", rng,
                                   deep_ch, sq_d, 1)
        self.spatial = [
            Conv2d(store, f"{name}.sp{k}", rng, sq_s + sq_d, 1, k)
            for k in SPATIAL_KERNELS
        ]
        self.skip_channels = skip_ch
        self.deep_channels = deep_ch

    def __call__(self, skip: Tensor, deep: Tensor) -> Tensor:
        ch = ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(deep)))))
        sq_s = self.squeeze_skip(skip)
        sq_d = self.squeeze_deep(deep)
        up_d = ops.bilinear_upsample(sq_d, skip.shape[2], skip.shape[3])
        cat = ops.concat_channels([sq_s, up_d])
        acc = self.spatial[0](cat)
        for conv in self.spatial[1:]:
            acc = ops.add(acc, conv(cat))
        sp = ops.sigmoid(acc)
        return ops.mul(ops.mul(skip, ch), sp)
