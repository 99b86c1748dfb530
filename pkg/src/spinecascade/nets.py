"""Encoder-decoder networks for the two stages.

Both stages share one template: ``depth`` encoder levels of two
conv-BN-ReLU blocks followed by 2x2x2 max pooling, a two-block bottleneck,
and a mirrored decoder where each level upsamples with a stride-2 transposed
convolution, concatenates the matching encoder features and applies two
more conv-BN-ReLU blocks. A final 3x3x3 convolution maps to the output
channels. Level ``l`` has ``base_width * width_growth**l`` channels.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    BatchNormState,
    Parameter,
    Tensor,
    batchnorm,
    concat_channels,
    conv3d,
    deconv3d,
    load_checkpoint,
    maxpool3d,
    no_grad,
    relu,
    save_checkpoint,
    sigmoid,
    softmax_channels,
)
from .autodiff.checkpoint import CheckpointError


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    out_channels: int = 4
    depth: int = 3
    base_width: int = 8
    width_growth: int = 2

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "depth", "base_width", "width_growth"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"NetConfig.{name} must be >= 1")

    @property
    def multiple(self):
        return 2**self.depth

    def widths(self):
        return [self.base_width * self.width_growth**level for level in range(self.depth + 1)]

    def to_dict(self):
        return asdict(self)


SEMANTIC = NetConfig(in_channels=1, out_channels=4)
INSTANCE = NetConfig(in_channels=2, out_channels=1)


def parameter_count(cfg: NetConfig) -> int:
    """Closed-form number of trainable scalars.

    conv c->k: 27ck + k; batch norm on k channels: 2k; transposed conv c->k: 64ck + k.
    """

    def block(c, k):
        return 27 * c * k + k + 2 * k

    w = cfg.widths()
    total = 0
    c = cfg.in_channels
    for level in range(cfg.depth + 1):
        total += block(c, w[level]) + block(w[level], w[level])
        c = w[level]
    for level in reversed(range(cfg.depth)):
        total += 64 * w[level + 1] * w[level] + w[level]
        total += block(2 * w[level], w[level]) + block(w[level], w[level])
    total += 27 * w[0] * cfg.out_channels + cfg.out_channels
    return total


class UNet:
    """Parameters, batch-norm state and forward pass for one :class:`NetConfig`."""

    head = "logits"

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.training = True
        self.params: OrderedDict[str, Parameter] = OrderedDict()
        self.bn: OrderedDict[str, BatchNormState] = OrderedDict()
        rng = np.random.default_rng(seed)
        w = cfg.widths()

        c = cfg.in_channels
        for level in range(cfg.depth + 1):
            prefix = "bottleneck" if level == cfg.depth else f"enc{level}"
            self._add_block(f"{prefix}.a", c, w[level], rng, dtype)
            self._add_block(f"{prefix}.b", w[level], w[level], rng, dtype)
            c = w[level]
        for level in reversed(range(cfg.depth)):
            fan_in = w[level + 1] * 8  # each output voxel sees 2^3 taps per input channel
            self._add(f"dec{level}.up.w", rng.standard_normal((w[level + 1], w[level], 4, 4, 4)) * np.sqrt(2.0 / fan_in), dtype)
            self._add(f"dec{level}.up.b", np.zeros(w[level]), dtype)
            self._add_block(f"dec{level}.a", 2 * w[level], w[level], rng, dtype)
            self._add_block(f"dec{level}.b", w[level], w[level], rng, dtype)
        self._add("head.w", rng.standard_normal((cfg.out_channels, w[0], 3, 3, 3)) * np.sqrt(1.0 / (27 * w[0])), dtype)
        self._add("head.b", np.zeros(cfg.out_channels), dtype)

    def _add(self, name, value, dtype):
        self.params[name] = Parameter(np.asarray(value, dtype=dtype), name=name)

    def _add_block(self, name, c, k, rng, dtype):
        self._add(f"{name}.w", rng.standard_normal((k, c, 3, 3, 3)) * np.sqrt(2.0 / (27 * c)), dtype)
        self._add(f"{name}.b", np.zeros(k), dtype)
        self._add(f"{name}.gamma", np.ones(k), dtype)
        self._add(f"{name}.beta", np.zeros(k), dtype)
        self.bn[name] = BatchNormState(k)

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def _block(self, name, x):
        p = self.params
        x = conv3d(x, p[f"{name}.w"], p[f"{name}.b"])
        x = batchnorm(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], self.training)
        return relu(x)

    def check_input(self, shape):
        if len(shape) != 5 or shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [N, {self.cfg.in_channels}, D, H, W] input, got {tuple(shape)}")
        m = self.cfg.multiple
        if any(s % m for s in shape[2:]):
            raise ValueError(f"spatial extents {tuple(shape[2:])} must be divisible by 2^depth = {m}")

    def logits(self, x: Tensor) -> Tensor:
        """Pre-activation head output, same spatial shape as ``x``."""
        self.check_input(x.shape)
        p = self.params
        skips = []
        for level in range(self.cfg.depth):
            x = self._block(f"enc{level}.a", x)
            x = self._block(f"enc{level}.b", x)
            skips.append(x)
            x = maxpool3d(x)
        x = self._block("bottleneck.a", x)
        x = self._block("bottleneck.b", x)
        for level in reversed(range(self.cfg.depth)):
            x = deconv3d(x, p[f"dec{level}.up.w"], p[f"dec{level}.up.b"])
            x = concat_channels([skips[level], x])
            x = self._block(f"dec{level}.a", x)
            x = self._block(f"dec{level}.b", x)
        return conv3d(x, p["head.w"], p["head.b"])

    def activate(self, logits: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return self.activate(self.logits(x))

    def infer_logits(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode logits for a plain array, without building a graph."""
        was = self.training
        self.training = False
        try:
            with no_grad():
                return self.logits(Tensor(np.asarray(x, dtype=self.dtype))).data
        finally:
            self.training = was

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    # checkpoints

    def state_arrays(self):
        arrays = OrderedDict()
        for name, p in self.params.items():
            arrays[name] = p.data
        for name, p in self.params.items():
            arrays[f"{name}@adam_m"] = p.adam_m
            arrays[f"{name}@adam_v"] = p.adam_v
        for name, s in self.bn.items():
            arrays[f"{name}@running_mean"] = s.running_mean
            arrays[f"{name}@running_var"] = s.running_var
        return arrays

    def save(self, path, optimizer=None):
        step = max((p.step_count for p in self.params.values()), default=0)
        opt = {"step_count": step}
        if optimizer is not None:
            opt.update(lr=optimizer.lr, beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps)
        config = {"kind": self.kind, **self.cfg.to_dict()}
        return save_checkpoint(path, self.state_arrays(), config, opt)

    def load_state(self, arrays, optimizer_state=None):
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks arrays: {sorted(missing)[:5]}")
        for name, target in expected.items():
            src = arrays[name]
            if src.shape != target.shape:
                raise CheckpointError(f"{name}: checkpoint shape {src.shape} != network shape {target.shape}")
            target[...] = src
        step = int((optimizer_state or {}).get("step_count", 0))
        for p in self.params.values():
            p.step_count = step


class SemanticNet(UNet):
    """Four-class (background, cervical, thoracic, lumbar) posterior head."""

    kind = "semantic"

    def activate(self, logits):
        return softmax_channels(logits)


class InstanceNet(UNet):
    """Binary next-vertebra probability from (CT, memory) input channels."""

    kind = "instance"

    def activate(self, logits):
        return sigmoid(logits)


_KINDS = {"semantic": SemanticNet, "instance": InstanceNet}


def build_net(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    """SemanticNet for multi-channel output, InstanceNet for a single channel."""
    if not isinstance(cfg, NetConfig):
        raise ValueError("build_net expects a NetConfig")
    cls = InstanceNet if cfg.out_channels == 1 else SemanticNet
    return cls(cfg, seed=seed, dtype=dtype)


def forward_semantic(net: SemanticNet, patch) -> Tensor:
    """Per-voxel class posteriors ``[1, 4, D, H, W]``."""
    return net.forward(patch if isinstance(patch, Tensor) else Tensor(patch))


def forward_instance(net: InstanceNet, ct_patch, memory_patch) -> Tensor:
    """Probability map of the next vertebra given the CT and memory channels."""
    ct = ct_patch if isinstance(ct_patch, Tensor) else Tensor(ct_patch)
    mem = memory_patch if isinstance(memory_patch, Tensor) else Tensor(np.asarray(memory_patch, dtype=ct.dtype))
    if ct.shape != mem.shape:
        raise ValueError(f"CT patch {ct.shape} and memory patch {mem.shape} differ")
    return net.forward(concat_channels([ct, mem]))


def load_net(path) -> UNet:
    """Rebuild a network from a checkpoint written by :meth:`UNet.save`."""
    config, arrays, opt = load_checkpoint(path)
    config = dict(config)
    kind = config.pop("kind", None)
    if kind not in _KINDS:
        raise CheckpointError(f"unknown network kind {kind!r}")
    cfg = NetConfig(**config)
    dtype = arrays[next(iter(arrays))].dtype
    net = _KINDS[kind](cfg, dtype=dtype)
    net.load_state(arrays, opt)
    return net
