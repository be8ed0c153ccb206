"""Layers, small CNN builders, and the SGD training/evaluation loop.

A model is an ordered list of layers; gradients are composed per layer in
reverse order, so there is no general autodiff graph to audit. Layers
whose kernels can be synthesized (fgf_conv) regenerate their dense kernel
from the current scalars on every forward pass: the FGF path is a
parameterization of an ordinary convolution, not a different operator,
and the two must agree bit-for-bit for the same kernel.

Conv and fc layers optionally carry a binary keep-mask over their weight
tensor. Masked entries hold exactly 0.0 and their gradients are zeroed
before every update, so they stay 0.0 through any training trajectory.

Models default to float32 storage; building with dtype=float64 runs the
whole engine at 64-bit for finite-difference checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fgf
from .errors import DimensionError, NumericError, UsageError
from .ndcore import Grad, conv2d_backward, conv2d_forward, im2col, sgd_step, substream

__all__ = [
    "LayerSpec",
    "TrainConfig",
    "Model",
    "ConvLayer",
    "FgfConvLayer",
    "FcLayer",
    "BatchNormLayer",
    "MaxPoolLayer",
    "ReluLayer",
    "build_model",
    "ARCHITECTURES",
    "forward",
    "softmax_cross_entropy",
    "Trainer",
    "backward_and_step",
    "evaluate",
    "param_count",
]


@dataclass
class LayerSpec:
    """Declarative layer description used by `build_model`.

    kind-specific dims:
      conv / masked_conv: (out_ch, in_ch, kh, kw, stride, pad)
      fgf_conv:           (out_ch, in_ch, kh, kw, stride, pad) + fgf_kind
      fc:                 (in_features, out_features)
      bn:                 (channels,)
      pool:               (size, stride)
      relu:               ()
    """

    kind: str
    dims: tuple = ()
    fgf_kind: str | None = None
    layer_id: str = ""


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class ConvLayer:
    kind = "conv"

    def __init__(self, layer_id, out_ch, in_ch, kh, kw, stride=1, pad=0, dtype=np.float32):
        self.layer_id = layer_id
        self.out_ch, self.in_ch, self.kh, self.kw = out_ch, in_ch, kh, kw
        self.stride, self.pad = stride, pad
        self.weight = Grad.of(np.zeros((out_ch, in_ch, kh, kw), dtype=dtype))
        self.mask: np.ndarray | None = None  # uint8, same shape as weight
        self._x = None

    @property
    def spec_kind(self) -> str:
        return "masked_conv" if self.mask is not None else "conv"

    def init_params(self, rng):
        fan_in = self.in_ch * self.kh * self.kw
        scale = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, scale, size=self.weight.value.shape)
        self.weight.value = w.astype(self.weight.value.dtype)

    def forward(self, x, training=False):
        self._x = x
        self._cols = im2col(x, self.kh, self.kw, self.stride, self.pad)
        w = self.weight.value
        if self.mask is not None:
            w = w * self.mask
        return conv2d_forward(x, w, self.stride, self.pad, cols=self._cols)

    def backward(self, grad_out):
        gx, gw = conv2d_backward(
            grad_out, self._x, self.weight.value, self.stride, self.pad, cols=self._cols
        )
        if self.mask is not None:
            gw = gw * self.mask
        self.weight.gradient = self.weight.gradient + gw
        return gx

    def param_slots(self):
        return {"weight": self.weight}

    def logical_params(self) -> int:
        if self.mask is not None:
            return int(np.count_nonzero(self.weight.value))
        return self.weight.value.size

    def stored_params(self) -> int:
        return self.weight.value.size


class FgfConvLayer:
    """Convolution whose kernel is synthesized from FGF scalars.

    Parameters are held as one float64 row per output filter
    ([out, 7] for 3d, [out, 5+in] for ca, [out, 5*in] for orig) and
    projected back into their domain after every update.
    """

    kind = "fgf_conv"

    def __init__(self, layer_id, fgf_kind, out_ch, in_ch, kh, kw, stride=1, pad=0,
                 dtype=np.float32):
        self.layer_id = layer_id
        self.fgf_kind = fgf_kind
        self.out_ch, self.in_ch, self.kh, self.kw = out_ch, in_ch, kh, kw
        self.stride, self.pad = stride, pad
        self.dtype = dtype
        width = self.params_per_filter(fgf_kind, in_ch)
        # scalars live in the model's storage dtype; synthesis and gradient
        # math promote to float64
        self.filter_params = Grad.of(np.zeros((out_ch, width), dtype=dtype))
        self._x = None

    @staticmethod
    def params_per_filter(fgf_kind: str, in_ch: int) -> int:
        if fgf_kind == "3d":
            return 7
        if fgf_kind == "ca":
            return 5 + in_ch
        if fgf_kind == "orig":
            return 5 * in_ch
        raise ValueError(f"unknown fgf kind {fgf_kind!r}")

    def vec_to_params(self, vec: np.ndarray) -> fgf.FgfParams:
        vec = np.asarray(vec, dtype=np.float64)
        if self.fgf_kind == "3d":
            return fgf.Fgf3dParams.from_vector(vec)
        if self.fgf_kind == "ca":
            return fgf.CaFgfParams.from_shared(vec[:5], vec[5:])
        return fgf.FgfOrigParams(vec.reshape(self.in_ch, 5))

    @staticmethod
    def params_to_vec(p: fgf.FgfParams) -> np.ndarray:
        if isinstance(p, fgf.Fgf3dParams):
            return p.to_vector()
        if isinstance(p, fgf.CaFgfParams):
            return np.concatenate([p.shared_vector(), p.weights])
        return p.per_channel.reshape(-1)

    def init_params(self, rng):
        rows = []
        for _ in range(self.out_ch):
            a, b, c = rng.uniform(0.0, 2.0, size=3)
            x0 = rng.uniform(0.0, self.kh - 1) if self.kh > 1 else 0.0
            y0 = rng.uniform(0.0, self.kw - 1) if self.kw > 1 else 0.0
            ch0 = rng.uniform(0.0, self.in_ch - 1) if self.in_ch > 1 else 0.0
            sigma = rng.uniform(0.5, 2.0)
            if self.fgf_kind == "3d":
                p = fgf.Fgf3dParams(a, b, c, x0, y0, ch0, sigma)
            elif self.fgf_kind == "ca":
                w = rng.normal(0.0, 1.0 / np.sqrt(self.in_ch), size=self.in_ch)
                p = fgf.CaFgfParams(a, b, x0, y0, sigma, w)
            else:
                pc = np.stack(
                    [
                        np.array([a, b, x0, y0, sigma])
                        for a, b, x0, y0, sigma in zip(
                            rng.uniform(0, 2, self.in_ch),
                            rng.uniform(0, 2, self.in_ch),
                            rng.uniform(0, self.kh - 1 if self.kh > 1 else 1, self.in_ch),
                            rng.uniform(0, self.kw - 1 if self.kw > 1 else 1, self.in_ch),
                            rng.uniform(0.5, 2.0, self.in_ch),
                        )
                    ]
                )
                p = fgf.FgfOrigParams(pc)
            rows.append(self.params_to_vec(p))
        self.filter_params.value = np.stack(rows).astype(self.filter_params.value.dtype)
        self.filter_params.gradient = np.zeros_like(self.filter_params.value)

    def synthesize_kernel(self) -> np.ndarray:
        """Dense [out, in, kh, kw] kernel from the current scalars."""
        kernels = [
            fgf.synth_kernel(self.in_ch, self.kh, self.kw, self.vec_to_params(row))
            for row in self.filter_params.value
        ]
        return np.stack(kernels).astype(self.dtype)

    def forward(self, x, training=False):
        self._x = x
        self._cols = im2col(x, self.kh, self.kw, self.stride, self.pad)
        return conv2d_forward(x, self.synthesize_kernel(), self.stride, self.pad,
                              cols=self._cols)

    def backward(self, grad_out):
        kernel = self.synthesize_kernel()
        gx, gk = conv2d_backward(grad_out, self._x, kernel, self.stride, self.pad,
                                 cols=self._cols)
        rows = []
        for o in range(self.out_ch):
            p = self.vec_to_params(self.filter_params.value[o])
            g = fgf.fgf_param_grads(self.in_ch, self.kh, self.kw, p, gk[o].astype(np.float64))
            rows.append(self.params_to_vec(g))
        grads = np.stack(rows).astype(self.filter_params.gradient.dtype)
        self.filter_params.gradient = self.filter_params.gradient + grads
        return gx

    def project(self):
        dt = self.filter_params.value.dtype
        self.filter_params.value = np.stack(
            [
                self.params_to_vec(fgf.project_params(self.vec_to_params(row)))
                for row in self.filter_params.value
            ]
        ).astype(dt)

    def param_slots(self):
        return {"filter_params": self.filter_params}

    def logical_params(self) -> int:
        return self.filter_params.value.size

    def stored_params(self) -> int:
        return self.filter_params.value.size


class FcLayer:
    kind = "fc"

    def __init__(self, layer_id, in_features, out_features, dtype=np.float32):
        self.layer_id = layer_id
        self.in_features, self.out_features = in_features, out_features
        self.weight = Grad.of(np.zeros((out_features, in_features), dtype=dtype))
        self.bias = Grad.of(np.zeros(out_features, dtype=dtype))
        self.mask: np.ndarray | None = None
        self._x = None
        self._xshape = None

    @property
    def spec_kind(self) -> str:
        return "fc"

    def init_params(self, rng):
        scale = np.sqrt(2.0 / self.in_features)
        w = rng.normal(0.0, scale, size=self.weight.value.shape)
        self.weight.value = w.astype(self.weight.value.dtype)

    def forward(self, x, training=False):
        self._xshape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise DimensionError(
                f"{self.layer_id}: got {flat.shape[1]} features, want {self.in_features}"
            )
        self._x = flat
        w = self.weight.value
        if self.mask is not None:
            w = w * self.mask
        out = flat.astype(np.float64) @ w.astype(np.float64).T + self.bias.value
        return out.astype(x.dtype)

    def backward(self, grad_out):
        g64 = grad_out.astype(np.float64)
        gw = g64.T @ self._x.astype(np.float64)
        if self.mask is not None:
            gw = gw * self.mask
        gb = g64.sum(axis=0)
        dt = self.weight.value.dtype
        self.weight.gradient = self.weight.gradient + gw.astype(dt)
        self.bias.gradient = self.bias.gradient + gb.astype(dt)
        gx = (g64 @ self.weight.value.astype(np.float64)).astype(grad_out.dtype)
        return gx.reshape(self._xshape)

    def param_slots(self):
        return {"weight": self.weight, "bias": self.bias}

    def logical_params(self) -> int:
        w = (
            int(np.count_nonzero(self.weight.value))
            if self.mask is not None
            else self.weight.value.size
        )
        return w + self.bias.value.size

    def stored_params(self) -> int:
        return self.weight.value.size + self.bias.value.size


class BatchNormLayer:
    """Per-channel batch norm over [N, C, H, W]; never pruned or converted."""

    kind = "bn"

    def __init__(self, layer_id, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.layer_id = layer_id
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Grad.of(np.ones(channels, dtype=dtype))
        self.beta = Grad.of(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    @property
    def spec_kind(self) -> str:
        return "bn"

    def init_params(self, rng):
        pass

    def forward(self, x, training=False):
        if training:
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            var = x.var(axis=(0, 2, 3), dtype=np.float64)
            self.running_mean = (
                (1 - self.momentum) * self.running_mean + self.momentum * mean
            ).astype(x.dtype)
            self.running_var = (
                (1 - self.momentum) * self.running_var + self.momentum * var
            ).astype(x.dtype)
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, x.shape)
        out = self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]
        return out.astype(x.dtype)

    def backward(self, grad_out):
        xhat, inv_std, shape = self._cache
        n = shape[0] * shape[2] * shape[3]
        g64 = grad_out.astype(np.float64)
        dgamma = (g64 * xhat).sum(axis=(0, 2, 3))
        dbeta = g64.sum(axis=(0, 2, 3))
        dt = self.gamma.value.dtype
        self.gamma.gradient = self.gamma.gradient + dgamma.astype(dt)
        self.beta.gradient = self.beta.gradient + dbeta.astype(dt)
        gxhat = g64 * self.gamma.value[None, :, None, None]
        gx = (
            gxhat
            - gxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / n
        ) * inv_std[None, :, None, None]
        return gx.astype(grad_out.dtype)

    def param_slots(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def logical_params(self) -> int:
        return 2 * self.channels

    def stored_params(self) -> int:
        return 2 * self.channels


class MaxPoolLayer:
    kind = "pool"

    def __init__(self, layer_id, size=2, stride=2):
        self.layer_id = layer_id
        self.size, self.stride = size, stride
        self._cache = None

    @property
    def spec_kind(self) -> str:
        return "pool"

    def init_params(self, rng):
        pass

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        k, s = self.size, self.stride
        if k == s and h % k == 0 and w % k == 0:
            # non-overlapping windows: pure reshape, no gather
            oh, ow = h // k, w // k
            blocks = np.ascontiguousarray(
                x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
            ).reshape(n, c, oh, ow, k * k)
            arg = blocks.argmax(axis=4)
            out = np.take_along_axis(blocks, arg[..., None], axis=4)[..., 0]
            self._cache = ("fast", arg, x.shape)
            return np.ascontiguousarray(out)
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        sn, sc, sh, sw = x.strides
        windows = np.lib.stride_tricks.as_strided(
            x,
            shape=(n, c, oh, ow, k, k),
            strides=(sn, sc, sh * s, sw * s, sh, sw),
            writeable=False,
        )
        flat = windows.reshape(n, c, oh, ow, -1)
        arg = flat.argmax(axis=4)
        out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
        self._cache = ("general", arg, x.shape, oh, ow)
        return np.ascontiguousarray(out)

    def backward(self, grad_out):
        k, s = self.size, self.stride
        if self._cache[0] == "fast":
            _, arg, xshape = self._cache
            n, c, h, w = xshape
            oh, ow = h // k, w // k
            gblocks = np.zeros((n, c, oh, ow, k * k), dtype=grad_out.dtype)
            np.put_along_axis(gblocks, arg[..., None], grad_out[..., None], axis=4)
            return np.ascontiguousarray(
                gblocks.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
            ).reshape(xshape)
        _, arg, xshape, oh, ow = self._cache
        n, c, h, w = xshape
        gx = np.zeros(xshape, dtype=grad_out.dtype)
        ii = arg // k
        jj = arg % k
        ns, cs = np.ix_(np.arange(n), np.arange(c))
        for i in range(oh):
            for j in range(ow):
                rows = i * s + ii[:, :, i, j]
                cols = j * s + jj[:, :, i, j]
                np.add.at(gx, (ns, cs, rows, cols), grad_out[:, :, i, j])
        return gx

    def param_slots(self):
        return {}

    def logical_params(self) -> int:
        return 0

    def stored_params(self) -> int:
        return 0


class ReluLayer:
    kind = "relu"

    def __init__(self, layer_id):
        self.layer_id = layer_id
        self._mask = None

    @property
    def spec_kind(self) -> str:
        return "relu"

    def init_params(self, rng):
        pass

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, grad_out):
        return np.where(self._mask, grad_out, 0)

    def param_slots(self):
        return {}

    def logical_params(self) -> int:
        return 0

    def stored_params(self) -> int:
        return 0


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass
class Model:
    layers: list
    input_shape: tuple  # (C, H, W)
    meta: dict = field(default_factory=dict)
    dtype: type = np.float32

    def layer_by_id(self, layer_id: str):
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise UsageError(f"no layer named {layer_id!r}")

    def state_capture(self) -> dict:
        """Copy of every mutable array: weights, masks, fgf scalars, bn stats."""
        state = {}
        for i, layer in enumerate(self.layers):
            for name, slot in layer.param_slots().items():
                state[(i, name)] = slot.value.copy()
            if getattr(layer, "mask", None) is not None:
                state[(i, "mask")] = layer.mask.copy()
            if isinstance(layer, BatchNormLayer):
                state[(i, "running_mean")] = layer.running_mean.copy()
                state[(i, "running_var")] = layer.running_var.copy()
        return state

    def state_restore(self, state: dict):
        for i, layer in enumerate(self.layers):
            for name, slot in layer.param_slots().items():
                slot.value = state[(i, name)].copy()
                slot.gradient = np.zeros_like(slot.value)
            if (i, "mask") in state:
                layer.mask = state[(i, "mask")].copy()
            elif getattr(layer, "mask", None) is not None:
                layer.mask = None
            if isinstance(layer, BatchNormLayer):
                layer.running_mean = state[(i, "running_mean")].copy()
                layer.running_var = state[(i, "running_var")].copy()

    def zero_gradients(self):
        for layer in self.layers:
            for slot in layer.param_slots().values():
                slot.gradient = np.zeros_like(slot.value)


_LAYER_BUILDERS = {
    "conv": lambda s, dt: ConvLayer(s.layer_id, *s.dims, dtype=dt),
    "fgf_conv": lambda s, dt: FgfConvLayer(s.layer_id, s.fgf_kind, *s.dims, dtype=dt),
    "fc": lambda s, dt: FcLayer(s.layer_id, *s.dims, dtype=dt),
    "bn": lambda s, dt: BatchNormLayer(s.layer_id, *s.dims, dtype=dt),
    "pool": lambda s, dt: MaxPoolLayer(s.layer_id, *s.dims),
    "relu": lambda s, dt: ReluLayer(s.layer_id),
}


def build_model(
    specs: list[LayerSpec],
    input_shape: tuple,
    seed: int = 0,
    name: str = "model",
    dtype=np.float32,
) -> Model:
    """Instantiate and initialize a model from layer specs.

    Missing layer_ids are filled as kind+index; weight init draws from a
    per-layer substream of the seed, so a layer's initial weights do not
    depend on the rest of the architecture.
    """
    layers = []
    for i, spec in enumerate(specs):
        if spec.kind not in _LAYER_BUILDERS:
            raise UsageError(f"unknown layer kind {spec.kind!r}")
        if not spec.layer_id:
            spec = LayerSpec(spec.kind, spec.dims, spec.fgf_kind, f"{spec.kind}{i}")
        layer = _LAYER_BUILDERS[spec.kind](spec, dtype)
        layer.init_params(substream(seed, "init", spec.layer_id))
        layers.append(layer)
    ids = [l.layer_id for l in layers]
    if len(set(ids)) != len(ids):
        raise UsageError(f"duplicate layer ids: {ids}")
    return Model(layers=layers, input_shape=tuple(input_shape),
                 meta={"name": name, "seed": seed, "epoch": 0}, dtype=dtype)


def cnn3_specs(in_ch: int = 1, num_classes: int = 10) -> list[LayerSpec]:
    """Three conv-bn-relu-pool blocks (8, 16, 32 filters) + classifier.

    Batch norm after every conv keeps the 0.1 learning-rate regime stable
    and absorbs the overall scale of synthesized kernels once a block is
    converted to a gainless FGF parameterization. 28x28 input.
    """
    specs = []
    for i, (out_c, in_c) in enumerate([(8, in_ch), (16, 8), (32, 16)], start=1):
        specs.append(LayerSpec("conv", (out_c, in_c, 3, 3, 1, 1), layer_id=f"conv{i}"))
        specs.append(LayerSpec("bn", (out_c,), layer_id=f"bn{i}"))
        specs.append(LayerSpec("relu", layer_id=f"relu{i}"))
        specs.append(LayerSpec("pool", (2, 2), layer_id=f"pool{i}"))
    specs.append(LayerSpec("fc", (32 * 3 * 3, num_classes), layer_id="fc"))
    return specs


def cnn6_specs(in_ch: int = 3, num_classes: int = 10) -> list[LayerSpec]:
    """Six-conv CIFAR-scale net with batch norm; 32x32 input."""
    chans = [(16, in_ch), (16, 16), (32, 16), (32, 32), (64, 32), (64, 64)]
    specs = []
    for i, (out_c, in_c) in enumerate(chans, start=1):
        specs.append(LayerSpec("conv", (out_c, in_c, 3, 3, 1, 1), layer_id=f"conv{i}"))
        specs.append(LayerSpec("bn", (out_c,), layer_id=f"bn{i}"))
        specs.append(LayerSpec("relu", layer_id=f"relu{i}"))
        if i % 2 == 0:
            specs.append(LayerSpec("pool", (2, 2), layer_id=f"pool{i // 2}"))
    specs.append(LayerSpec("fc", (64 * 4 * 4, num_classes), layer_id="fc"))
    return specs


ARCHITECTURES = {
    "cnn3": lambda in_ch, classes: (cnn3_specs(in_ch, classes), (in_ch, 28, 28)),
    "cnn6": lambda in_ch, classes: (cnn6_specs(in_ch, classes), (in_ch, 32, 32)),
}


# --------------------------------------------------------------------------
# Forward / loss / training
# --------------------------------------------------------------------------


def forward(model: Model, batch: np.ndarray, training: bool = False) -> np.ndarray:
    if batch.ndim != 4 or batch.shape[1:] != model.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} incompatible with input {model.input_shape}"
        )
    x = batch.astype(model.dtype, copy=False)
    for layer in model.layers:
        x = layer.forward(x, training=training)
    return x


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -np.log(np.maximum(probs[np.arange(n), labels], 1e-300))
    loss = float(nll.mean())
    grad = probs
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 10
    seed: int = 0
    lr_schedule: list[int] | None = None  # epochs at which lr steps down x0.1
    log_every: int = 200

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise UsageError(f"lr must be non-negative, got {self.lr}")

    def milestones(self) -> list[int]:
        if self.lr_schedule is not None:
            return self.lr_schedule
        return [int(self.epochs * 0.5), int(self.epochs * 0.75)]

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones() if m <= epoch and m > 0)
        return self.lr * (0.1 ** drops)


def _step_model(model: Model, x, labels, lr: float, momentum: float, buffers: dict) -> float:
    """One forward/backward/update pass; returns the batch loss."""
    model.zero_gradients()
    logits = forward(model, x, training=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    grad = dlogits
    for layer in reversed(model.layers):
        grad = layer.backward(grad)
    if lr == 0.0:
        return loss  # gradients computed, parameters untouched
    for i, layer in enumerate(model.layers):
        for name, slot in layer.param_slots().items():
            key = (i, name)
            if key not in buffers:
                buffers[key] = np.zeros_like(slot.value)
            slot.value, buffers[key] = sgd_step(
                slot.value, slot.gradient, lr, buffers[key], momentum
            )
        if isinstance(layer, FgfConvLayer):
            layer.project()
        mask = getattr(layer, "mask", None)
        if mask is not None:
            layer.weight.value = layer.weight.value * mask
    return loss


def backward_and_step(
    model: Model, batch, labels, config: TrainConfig, buffers: dict | None = None
) -> float:
    """Single optimization step at config.lr; `buffers` carries momentum
    across calls (fresh zeros when omitted)."""
    if buffers is None:
        buffers = {}
    return _step_model(model, batch, labels, config.lr, config.momentum, buffers)


class Trainer:
    """Epoch loop over a Dataset with step-decay lr and csv-line logging.

    Log records are `epoch,step,loss,lr,split_acc` with `nan` for the
    accuracy on non-evaluation steps. Momentum buffers are created fresh
    per `fit` call.
    """

    def __init__(self, config: TrainConfig, train_ds, val_ds=None, augment=None,
                 log=None):
        self.config = config
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.augment = augment
        self.log = log  # callable(str) or None

    def _emit(self, epoch, step, loss, lr, acc):
        if self.log is not None:
            self.log(f"{epoch},{step},{loss:.6f},{lr:g},{acc}")

    def fit(self, model: Model, epochs: int | None = None) -> float:
        """Train for `epochs` (default config.epochs); returns last val acc
        (nan when no validation split was given)."""
        from math import nan

        cfg = self.config
        n_epochs = cfg.epochs if epochs is None else epochs
        buffers: dict = {}
        val_acc = nan
        start_epoch = int(model.meta.get("epoch", 0))
        for local_epoch in range(n_epochs):
            epoch = start_epoch + local_epoch
            lr = cfg.lr_at(local_epoch)
            step = 0
            running = 0.0
            for x, y in data_batches(self.train_ds, cfg.batch_size, cfg.seed, epoch,
                                     self.augment):
                loss = _step_model(model, x, y, lr, cfg.momentum, buffers)
                running = loss
                step += 1
                if cfg.log_every and step % cfg.log_every == 0:
                    self._emit(epoch, step, running, lr, nan)
            if self.val_ds is not None and len(self.val_ds) > 0:
                val_acc = evaluate(model, self.val_ds)
            self._emit(epoch, step, running, lr, val_acc)
            model.meta["epoch"] = epoch + 1
        return val_acc


def data_batches(ds, batch_size, seed, epoch, augment=None):
    from .data import batch_iter

    return batch_iter(ds, batch_size, seed=seed, epoch=epoch, augment=augment)


def evaluate(model: Model, ds, batch_size: int = 256) -> float:
    """Top-1 accuracy in [0, 100] over a dataset split; deterministic."""
    if len(ds) == 0:
        raise UsageError("cannot evaluate an empty split")
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = ds.images[start : start + batch_size]
        y = ds.labels[start : start + batch_size]
        logits = forward(model, x, training=False)
        correct += int((logits.argmax(axis=1) == y).sum())
    return 100.0 * correct / len(ds)


def param_count(model: Model, counting: str = "logical") -> int:
    """Model parameter total; `logical` respects FGF formulas and masks,
    `stored` counts raw buffer sizes."""
    if counting == "logical":
        return sum(layer.logical_params() for layer in model.layers)
    if counting == "stored":
        return sum(layer.stored_params() for layer in model.layers)
    raise UsageError(f"counting must be 'logical' or 'stored', got {counting!r}")
