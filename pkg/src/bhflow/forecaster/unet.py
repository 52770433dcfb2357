"""Encoder-decoder next-frame model with skip connections."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ArgumentError
from ..pyramid import LossSpec, loss_terms
from . import layers as L


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    base_channels: int = 8

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ArgumentError("depth and base_channels must be >= 1")

    def to_dict(self):
        return asdict(self)


class UNet:
    """Stages ``enc0 .. enc{depth-1}``, a bottleneck ``mid`` and decoders
    ``dec{depth-1} .. dec0``; every stage is two conv-norm-relu blocks.

    ``params`` holds the trainable tensors and ``buffers`` the batch-norm
    running statistics, both keyed by dotted names.
    """

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.buffers = {}
        self.train_mode = True
        rng = np.random.default_rng(seed)
        c = config.base_channels
        chans = [c * 2**i for i in range(config.depth + 1)]
        c_in = 1
        for i in range(config.depth):
            self._double(f"enc{i}", c_in, chans[i], rng)
            c_in = chans[i]
        self._double("mid", chans[-2], chans[-1], rng)
        for i in reversed(range(config.depth)):
            up_in = chans[i + 1]
            self.params[f"up{i}.weight"] = self._init(rng, (up_in, 2, 2, chans[i]), up_in)
            self.params[f"up{i}.bias"] = np.zeros(chans[i], self.dtype)
            self._double(f"dec{i}", 2 * chans[i], chans[i], rng)
        self.params["head.weight"] = self._init(rng, (c, 1), c)
        self.params["head.bias"] = np.zeros(1, self.dtype)

    def _init(self, rng, shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(self.dtype)

    def _double(self, name, c_in, c_out, rng):
        for j, ci in ((0, c_in), (1, c_out)):
            p = f"{name}.conv{j}"
            self.params[f"{p}.weight"] = self._init(rng, (3, 3, ci, c_out), 9 * ci)
            self.params[f"{p}.gamma"] = np.ones(c_out, self.dtype)
            self.params[f"{p}.beta"] = np.zeros(c_out, self.dtype)
            self.buffers[f"{p}.running_mean"] = np.zeros(c_out, self.dtype)
            self.buffers[f"{p}.running_var"] = np.ones(c_out, self.dtype)

    def train(self):
        self.train_mode = True
        return self

    def eval(self):
        self.train_mode = False
        return self

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    # ----------------------------------------------------------------- forward

    def _block(self, p, x, caches):
        P = self.params
        y, c1 = L.conv3x3_forward(x, P[f"{p}.weight"])
        y, c2 = L.batchnorm_forward(
            y, P[f"{p}.gamma"], P[f"{p}.beta"],
            self.buffers[f"{p}.running_mean"], self.buffers[f"{p}.running_var"], self.train_mode,
        )
        y, c3 = L.relu_forward(y)
        caches.append((p, c1, c2, c3))
        return y

    def _check(self, x):
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise ArgumentError(f"expected (N, H, W) or (H, W) input, got {x.shape}")
        q = 2**self.config.depth
        if x.shape[1] % q or x.shape[2] % q:
            raise ArgumentError(f"input dims {x.shape[1:]} not divisible by {q}")
        return x.astype(self.dtype, copy=False)[..., None]

    def forward(self, x, keep_cache=False):
        """Map log frames ``(N, H, W)`` (or one ``(H, W)`` frame) to predictions
        of the same shape."""
        single = np.ndim(x) == 2
        h = self._check(x)
        caches, skips, ops = [], [], []
        for i in range(self.config.depth):
            for j in range(2):
                h = self._block(f"enc{i}.conv{j}", h, caches)
            skips.append(h)
            h, pc = L.maxpool_forward(h)
            ops.append(("pool", pc))
        for j in range(2):
            h = self._block(f"mid.conv{j}", h, caches)
        for i in reversed(range(self.config.depth)):
            h, uc = L.upconv_forward(h, self.params[f"up{i}.weight"], self.params[f"up{i}.bias"])
            h, split = L.concat_forward(skips[i], h)
            ops.append(("up", i, uc, split))
            for j in range(2):
                h = self._block(f"dec{i}.conv{j}", h, caches)
        out, hc = L.conv1x1_forward(h, self.params["head.weight"], self.params["head.bias"])
        out = out[..., 0]
        if keep_cache:
            self._cache = (caches, ops, hc)
        return out[0] if single else out

    __call__ = forward

    # ---------------------------------------------------------------- backward

    def backward_from(self, dout):
        """Parameter gradients given dLoss/dOutput of the last cached forward."""
        caches, ops, hc = self._cache
        grads = {}
        dout = np.asarray(dout, dtype=self.dtype)
        if dout.ndim == 2:
            dout = dout[None]
        d, grads["head.weight"], grads["head.bias"] = L.conv1x1_backward(dout[..., None], hc)
        caches = list(caches)
        ops = list(ops)

        def block_back(d):
            p, c1, c2, c3 = caches.pop()
            d = L.relu_backward(d, c3)
            d, grads[f"{p}.gamma"], grads[f"{p}.beta"] = L.batchnorm_backward(d, c2)
            d, grads[f"{p}.weight"] = L.conv3x3_backward(d, c1)
            return d

        dskips = {}
        for i in range(self.config.depth):
            for _ in range(2):
                d = block_back(d)
            _, i_up, uc, split = ops.pop()
            dskips[i_up], d = L.concat_backward(d, split)
            d, grads[f"up{i_up}.weight"], grads[f"up{i_up}.bias"] = L.upconv_backward(d, uc)
        for _ in range(2):
            d = block_back(d)
        for i in reversed(range(self.config.depth)):
            _, pc = ops.pop()
            d = L.maxpool_backward(d, pc) + dskips[i]
            for _ in range(2):
                d = block_back(d)
        self._cache = None
        return grads

    def loss_and_grad(self, x, target, spec: LossSpec = None):
        """Mean multi-scale loss over the batch and parameter gradients."""
        pred = self.forward(x, keep_cache=True)
        target = np.asarray(target, dtype=self.dtype)
        if pred.shape != target.shape:
            raise ArgumentError(f"target shape {target.shape} differs from prediction {pred.shape}")
        total, terms, g = loss_terms(pred, target, spec)
        n = total.size
        grads = self.backward_from(g / n)
        return float(np.sum(total, dtype=np.float64) / n), grads

    def state_dict(self):
        out = {f"param.{k}": v for k, v in self.params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out
