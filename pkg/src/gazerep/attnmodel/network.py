"""Layers, network construction, forward passes and the mode transforms."""
from __future__ import annotations

import copy
import math
from collections import OrderedDict

import numpy as np

from ..numcore import functional as F
from ..numcore.rng import name_id, rng_stream
from ..numcore.tensor import Param, Tensor, as_tensor
from .config import ConfigError, NetworkConfig, OpSpec, mode_plan, _block_in

INIT_STREAM = 0x1A17


def _uniform_init(name: str, shape, fan_in: int, seed: int, dtype) -> np.ndarray:
    """He-style fan-in scaled uniform, drawn from a stream keyed by the param name."""
    bound = math.sqrt(6.0 / fan_in)
    rng = rng_stream(seed, INIT_STREAM, name_id(name))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv:
    def __init__(self, name, cin, cout, k, seed, dtype, stride=1, padding=0, dilation=1, groups=1, bias=False):
        self.name = name
        self.k, self.stride, self.padding, self.dilation, self.groups = k, stride, padding, dilation, groups
        fan_in = (cin // groups) * k * k
        self.weight = Param(_uniform_init(f"{name}.weight", (cout, cin // groups, k, k), fan_in, seed, dtype),
                            f"{name}.weight")
        self.bias = Param(np.zeros(cout, dtype), f"{name}.bias", decay=False) if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding, self.groups)


class BatchNorm:
    def __init__(self, name, channels, dtype):
        self.name = name
        self.gamma = Param(np.ones(channels, dtype), f"{name}.gamma", decay=False)
        self.beta = Param(np.zeros(channels, dtype), f"{name}.beta", decay=False)
        # kept in the model dtype so float32 checkpoints round-trip exactly
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class MaxPool:
    def __init__(self, name, k, stride, padding):
        self.name, self.k, self.stride, self.padding = name, k, stride, padding
        self.dilation = 1

    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return F.maxpool2d(x, self.k, self.stride, self.padding)


class SqueezeExcite:
    def __init__(self, name, channels, ratio, seed, dtype):
        hidden = max(1, channels // ratio)
        self.fc1 = Param(_uniform_init(f"{name}.fc1.weight", (hidden, channels), channels, seed, dtype),
                         f"{name}.fc1.weight")
        self.b1 = Param(np.zeros(hidden, dtype), f"{name}.fc1.bias", decay=False)
        self.fc2 = Param(_uniform_init(f"{name}.fc2.weight", (channels, hidden), hidden, seed, dtype),
                         f"{name}.fc2.weight")
        self.b2 = Param(np.zeros(channels, dtype), f"{name}.fc2.bias", decay=False)

    def params(self):
        return [self.fc1, self.b1, self.fc2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        s = F.global_avg_pool(x)  # [N, C]
        s = F.sigmoid(F.linear(F.relu(F.linear(s, self.fc1, self.b1)), self.fc2, self.b2))
        return F.mul(x, F.reshape(s, s.shape + (1, 1)))


class PlainBlock:
    def __init__(self, name, conv, channels, dtype):
        self.conv = conv
        self.bn = BatchNorm(f"{name}.bn", channels, dtype)

    def modules(self):
        return [self.conv, self.bn]

    def __call__(self, x, training):
        return F.relu(self.bn(self.conv(x), training))


class Bottleneck:
    def __init__(self, name, cin, cout, width, k, stride, groups, se_ratio, seed, dtype):
        self.conv1 = Conv(f"{name}.conv1", cin, width, 1, seed, dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", width, dtype)
        self.conv2 = Conv(f"{name}.conv2", width, width, k, seed, dtype, stride, (k - 1) // 2, 1, groups)
        self.bn2 = BatchNorm(f"{name}.bn2", width, dtype)
        self.conv3 = Conv(f"{name}.conv3", width, cout, 1, seed, dtype)
        self.bn3 = BatchNorm(f"{name}.bn3", cout, dtype)
        self.se = SqueezeExcite(f"{name}.se", cout, se_ratio, seed, dtype) if se_ratio else None
        self.shortcut = self.sc_bn = None
        if stride > 1 or cin != cout:
            self.shortcut = Conv(f"{name}.shortcut", cin, cout, 1, seed, dtype, stride)
            self.sc_bn = BatchNorm(f"{name}.shortcut_bn", cout, dtype)

    def modules(self):
        mods = [self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]
        if self.se is not None:
            mods.append(self.se)
        if self.shortcut is not None:
            mods += [self.shortcut, self.sc_bn]
        return mods

    def __call__(self, x, training):
        y = F.relu(self.bn1(self.conv1(x), training))
        y = F.relu(self.bn2(self.conv2(y), training))
        y = self.bn3(self.conv3(y), training)
        if self.se is not None:
            y = self.se(y)
        sc = x if self.shortcut is None else self.sc_bn(self.shortcut(x), training)
        return F.relu(F.add(y, sc))


class PoolBlock:
    def __init__(self, pool):
        self.pool = pool

    def modules(self):
        return [self.pool]

    def __call__(self, x, training):
        return self.pool(x)


class AttentionHead:
    """Depthwise 7x7, two 1x1 convs to ``width``, final 1x1 to one logit map."""

    def __init__(self, channels, width, seed, dtype):
        self.dw = Conv("attn.dw", channels, channels, 7, seed, dtype, padding=3, groups=channels, bias=True)
        self.fc1 = Conv("attn.fc1", channels, width, 1, seed, dtype, bias=True)
        self.fc2 = Conv("attn.fc2", width, width, 1, seed, dtype, bias=True)
        self.out = Conv("attn.out", width, 1, 1, seed, dtype, bias=True)

    def modules(self):
        return [self.dw, self.fc1, self.fc2, self.out]

    def __call__(self, x: Tensor) -> Tensor:
        y = F.relu(self.dw(x))
        y = F.relu(self.fc1(y))
        y = F.relu(self.fc2(y))
        A = self.out(y)  # [N, 1, Hd, Wd]
        return F.reshape(A, (A.shape[0],) + A.shape[2:])


class ClassificationHead:
    """1x1 conv to ``width``, 1x1 conv to N_C, global average pool (softmax applied by callers)."""

    def __init__(self, channels, width, n_classes, seed, dtype):
        if n_classes < 2:
            raise ConfigError("classification head needs at least two classes")
        self.n_classes = n_classes
        self.fc1 = Conv("cls.fc1", channels, width, 1, seed, dtype, bias=True)
        self.out = Conv("cls.out", width, n_classes, 1, seed, dtype, bias=True)

    def modules(self):
        return [self.fc1, self.out]

    def __call__(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(self.out(F.relu(self.fc1(x))))


def _walk_params(modules):
    for m in modules:
        if hasattr(m, "modules") and not isinstance(m, (Conv, BatchNorm, MaxPool, SqueezeExcite)):
            yield from _walk_params(m.modules())
        else:
            yield from m.params()


class Network:
    """Backbone stages plus optional attention and classification heads."""

    def __init__(self, config: NetworkConfig, seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.mode = "classification"
        self.stem = None
        self.stages: OrderedDict[str, list] = OrderedDict()
        self.ops: dict[str, object] = {}
        if config.stem is not None:
            st = config.stem
            conv = Conv("stem.conv", config.in_channels, st.channels, st.kernel, seed, self.dtype,
                        st.stride, (st.kernel - 1) // 2)
            self.stem = PlainBlock("stem", conv, st.channels, self.dtype)
            self.ops["stem.conv"] = conv
        for s in config.stages:
            blocks = []
            cin = _block_in(config, s)
            if s.pool is not None:
                pk, ps = s.pool
                pool = MaxPool(f"{s.name}.pool", pk, ps, (pk - 1) // 2)
                blocks.append(PoolBlock(pool))
                self.ops[pool.name] = pool
            for b in range(s.repeat):
                name = f"{s.name}.{b}"
                stride = s.stride if b == 0 else 1
                if s.block == "plain":
                    conv = Conv(f"{name}.conv", cin, s.channels, s.kernel, seed, self.dtype, stride,
                                (s.kernel - 1) // 2, 1, s.groups)
                    blocks.append(PlainBlock(name, conv, s.channels, self.dtype))
                    self.ops[conv.name] = conv
                else:
                    blk = Bottleneck(name, cin, s.channels, s.inner, s.kernel, stride, s.groups, s.se_ratio,
                                     seed, self.dtype)
                    blocks.append(blk)
                    for conv in (blk.conv1, blk.conv2, blk.conv3, blk.shortcut):
                        if conv is not None:
                            self.ops[conv.name] = conv
                cin = s.channels
            self.stages[s.name] = blocks
        self.attention_head = AttentionHead(config.stages[-1].channels, config.head_width, seed, self.dtype)
        self.classification_head: ClassificationHead | None = None
        self._apply_plan("classification")

    # -- structure -------------------------------------------------------------
    @property
    def channels(self) -> int:
        return self.config.stages[-1].channels

    @property
    def probe_points(self) -> list[str]:
        return list(self.stages)

    def attach_classifier(self, n_classes: int, seed: int | None = None) -> None:
        self.classification_head = ClassificationHead(self.channels, self.config.head_width, n_classes,
                                                      self.seed if seed is None else seed, self.dtype)

    def backbone_modules(self):
        mods = [self.stem] if self.stem is not None else []
        for blocks in self.stages.values():
            mods.extend(blocks)
        return mods

    def backbone_params(self) -> list[Param]:
        return list(_walk_params(self.backbone_modules()))

    def head_params(self, which: str) -> list[Param]:
        head = self.attention_head if which == "attention" else self.classification_head
        if head is None:
            raise ValueError(f"network has no {which} head")
        return list(_walk_params(head.modules()))

    def params(self) -> list[Param]:
        out = self.backbone_params() + self.head_params("attention")
        if self.classification_head is not None:
            out += self.head_params("classification")
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}

        def visit(mods):
            for m in mods:
                if isinstance(m, BatchNorm):
                    out.update(m.buffers())
                elif hasattr(m, "modules"):
                    visit(m.modules())
        visit(self.backbone_modules())
        return out

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Every parameter and running statistic by name."""
        st = OrderedDict((p.name, p.data) for p in self.params())
        st.update(self.buffers())
        return st

    def load_state(self, state: dict, strict: bool = True) -> None:
        own = self.state()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, arr in own.items():
            if k in state:
                src = np.asarray(state[k])
                if src.shape != arr.shape:
                    raise ValueError(f"{k}: shape {src.shape} != {arr.shape}")
                arr[...] = src.astype(arr.dtype)

    def spatial_spec(self) -> list[tuple]:
        return [(name, op.stride, op.dilation, op.padding) for name, op in self.ops.items()]

    def _apply_plan(self, mode: str) -> None:
        for spec in mode_plan(self.config, mode):
            op = self.ops[spec.name]
            op.stride, op.dilation, op.padding = spec.stride, spec.dilation, spec.padding
        self.mode = mode

    # -- forward ---------------------------------------------------------------
    def _input(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else as_tensor(np.asarray(image, self.dtype))
        if x.ndim == 3:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise ValueError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")
        exp = (self.config.in_channels,) + tuple(self.config.input_size)
        if tuple(x.shape[1:]) != exp:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match config {exp}")
        return x

    def features(self, image, training: bool = False) -> "OrderedDict[str, Tensor]":
        x = self._input(image)
        if self.stem is not None:
            x = self.stem(x, training)
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, blocks in self.stages.items():
            for blk in blocks:
                x = blk(x, training)
            out[name] = x
        return out


def build_network(config: NetworkConfig, seed: int = 0, n_classes: int | None = None,
                  dtype=np.float32) -> Network:
    """Fresh classification-mode network with deterministic initialization."""
    net = Network(config, seed, dtype)
    if n_classes is not None:
        net.attach_classifier(n_classes)
    return net


def dilate_for_attention(net: Network) -> Network:
    """Copy of ``net`` with the last N_D down-sampling ops removed and later convs dilated."""
    if net.mode != "classification":
        raise ValueError("dilate_for_attention expects a classification-mode network")
    out = copy.deepcopy(net)
    out._apply_plan("attention")
    return out


def undilate_for_classification(net: Network) -> Network:
    """Inverse of :func:`dilate_for_attention`; weights are copied unchanged."""
    if net.mode != "attention":
        raise ValueError("undilate_for_classification expects an attention-mode network")
    out = copy.deepcopy(net)
    out._apply_plan("classification")
    return out


def forward_features(net: Network, image, training: bool = False) -> "OrderedDict[str, Tensor]":
    return net.features(image, training)


def attention_forward(net: Network, image, training: bool = False) -> tuple[Tensor, Tensor]:
    """Logit map A ([N, H_D, W_D]) and its spatial softmax S_hat."""
    if net.attention_head is None:
        raise ValueError("network has no attention head")
    feats = net.features(image, training)
    A = net.attention_head(next(reversed(feats.values())))
    return A, F.softmax_spatial(A)


def classification_logits(net: Network, image, training: bool = False) -> Tensor:
    if net.classification_head is None:
        raise ValueError("network has no classification head; call attach_classifier first")
    feats = net.features(image, training)
    return net.classification_head(next(reversed(feats.values())))


def classification_forward(net: Network, image, training: bool = False) -> Tensor:
    """Class probabilities [N, N_C]."""
    return F.softmax_vec(classification_logits(net, image, training))
