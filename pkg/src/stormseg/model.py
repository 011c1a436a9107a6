"""Context-Guided network (CGNet) built from :mod:`stormseg.tensor` primitives.

Topology, for ``S = len(stage_channels)`` stages:

* stem: three 3x3 conv-BN-PReLU layers (the first with stride 2) to
  ``stage_channels[0]``, concatenated with the input average-pooled by 2,
  then BN-PReLU;
* each later stage ``s``: a down-sampling CG block (3x3 stride-2 projection)
  followed by ``blocks[s-1] - 1`` regular CG blocks; the stage output is
  ``concat(last block, first block[, input pooled by 2**(s+1)])`` passed
  through BN-PReLU (the pooled input is injected at every stage but the last);
* head: ``extra_conv_bn_relu_layers`` 3x3 conv-BN-ReLU layers, a 1x1
  classifier to three classes, bilinear up-sampling by ``2**S``, softmax.

A CG block computes ``x' = proj(x)``, joins the channel-wise 3x3 ``f_loc(x')``
and dilated channel-wise 3x3 ``f_sur(x')`` by concatenation + BN-PReLU and
multiplies the result by a per-channel sigmoid gate computed from its global
average through a two-layer bottleneck.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import N_CLASSES
from .tensor import (
    DimensionError,
    Tensor,
    activation,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    global_avg_pool,
    mul,
    relu,
    sigmoid,
    softmax_channels,
    upsample_bilinear,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PRELU_INIT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 4
    stage_channels: tuple[int, ...] = (32, 64, 128)
    blocks: tuple[int, ...] = (3, 21)
    dilations: tuple[int, ...] = (2, 4)
    reductions: tuple[int, ...] = (8, 16)
    extra_conv_bn_relu_layers: int = 0
    final_upsample_factor: int = 8
    residual: bool = False
    join_activation: str = "prelu"
    class_count: int = N_CLASSES
    seed: int = 0

    def __post_init__(self):
        for name in ("stage_channels", "blocks", "dilations", "reductions"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def stride(self) -> int:
        return 2 ** len(self.stage_channels)

    def validate(self) -> None:
        if self.class_count != N_CLASSES:
            raise ValueError(f"class_count must be {N_CLASSES}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if len(self.stage_channels) < 2:
            raise ValueError("need a stem and at least one CG stage")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError(f"zero-width stage in {self.stage_channels}")
        n_cg = len(self.stage_channels) - 1
        for name in ("blocks", "dilations", "reductions"):
            if len(getattr(self, name)) != n_cg:
                raise ValueError(f"{name} needs one entry per CG stage ({n_cg})")
        if any(b < 1 for b in self.blocks):
            raise ValueError("every CG stage needs at least one block")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilation must be >= 1")
        if any(c % 2 for c in self.stage_channels[1:]):
            raise ValueError("CG stage widths must be even")
        if self.extra_conv_bn_relu_layers < 0:
            raise ValueError("extra_conv_bn_relu_layers must be >= 0")
        if self.final_upsample_factor != self.stride:
            raise ValueError(
                f"final_upsample_factor {self.final_upsample_factor} does not restore the "
                f"accumulated stride {self.stride}")
        if self.join_activation not in ("prelu", "relu"):
            raise ValueError(f"unknown join_activation {self.join_activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# the cited CGNet with M=3, N=21
FULL_CONFIG = ModelConfig()
# a desk-scale network (about 20k parameters) used by tests and presets
TINY_CONFIG = ModelConfig(stage_channels=(8, 16, 32), blocks=(2, 2), dilations=(2, 4),
                          reductions=(4, 8))
# the "doubled final up-sampling" variant: one more stride stage
DOUBLED_UPSAMPLE_CONFIG = ModelConfig(stage_channels=(32, 64, 128, 128), blocks=(3, 21, 3),
                                      dilations=(2, 4, 8), reductions=(8, 16, 16),
                                      final_upsample_factor=16)

NAMED_CONFIGS = {"full": FULL_CONFIG, "tiny": TINY_CONFIG, "doubled": DOUBLED_UPSAMPLE_CONFIG}


def resolve_config(spec, **overrides) -> ModelConfig:
    """Accept a preset name, a dict (optionally with ``"base"``) or a config."""
    if isinstance(spec, ModelConfig):
        cfg = spec
    elif isinstance(spec, str):
        cfg = NAMED_CONFIGS[spec]
    else:
        spec = dict(spec)
        base = NAMED_CONFIGS[spec.pop("base", "full")]
        cfg = replace(base, **spec)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class ModelParams:
    """Named trainable tensors plus batch-norm running buffers."""

    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out


# ----------------------------------------------------------------------------
# parameter declaration
# ----------------------------------------------------------------------------

class _Declarer:
    def __init__(self):
        self.shapes: dict[str, tuple] = {}
        self.kinds: dict[str, tuple] = {}
        self.buffers: dict[str, tuple] = {}

    def add(self, name, shape, kind, fan_in=1):
        if name in self.shapes:
            raise ValueError(f"duplicate parameter name {name}")
        self.shapes[name] = tuple(shape)
        self.kinds[name] = (kind, fan_in)

    def conv(self, name, c_out, c_in_per_group, k, bias=False):
        fan_in = c_in_per_group * k * k
        self.add(f"{name}.weight", (c_out, c_in_per_group, k, k), "uniform", fan_in)
        if bias:
            self.add(f"{name}.bias", (c_out,), "zeros")

    def bn(self, name, c):
        self.add(f"{name}.weight", (c,), "ones")
        self.add(f"{name}.bias", (c,), "zeros")
        self.buffers[f"{name}.running_mean"] = ((c,), 0.0)
        self.buffers[f"{name}.running_var"] = ((c,), 1.0)

    def prelu(self, name, c):
        self.add(f"{name}.slope", (c,), "prelu")

    def conv_bn_act(self, name, c_in, c_out, k, act="prelu"):
        self.conv(f"{name}.conv", c_out, c_in, k)
        self.bn(f"{name}.bn", c_out)
        if act == "prelu":
            self.prelu(f"{name}.act", c_out)

    def bn_act(self, name, c, act="prelu"):
        self.bn(f"{name}.bn", c)
        if act == "prelu":
            self.prelu(f"{name}.act", c)

    def glo(self, name, c, reduction):
        hidden = max(1, c // reduction)
        self.conv(f"{name}.fc1", hidden, c, 1, bias=True)
        self.conv(f"{name}.fc2", c, hidden, 1, bias=True)

    def cg_block(self, name, c_in, c_out, reduction, down, join_act):
        if down:
            n = c_out
            self.conv_bn_act(f"{name}.proj", c_in, n, 3)
        else:
            n = c_out // 2
            self.conv_bn_act(f"{name}.proj", c_in, n, 1)
        self.conv(f"{name}.loc", n, 1, 3)
        self.conv(f"{name}.sur", n, 1, 3)
        self.bn_act(f"{name}.join", 2 * n, join_act)
        if down:
            self.conv(f"{name}.reduce", c_out, 2 * n, 1)
        self.glo(f"{name}.glo", c_out, reduction)


def _walk(cfg: ModelConfig, d: _Declarer) -> None:
    c0 = cfg.stage_channels[0]
    d.conv_bn_act("stem.0", cfg.input_channels, c0, 3)
    d.conv_bn_act("stem.1", c0, c0, 3)
    d.conv_bn_act("stem.2", c0, c0, 3)
    width = c0 + cfg.input_channels
    d.bn_act("stem.out", width)
    n_stages = len(cfg.stage_channels)
    for s in range(1, n_stages):
        ch = cfg.stage_channels[s]
        red = cfg.reductions[s - 1]
        d.cg_block(f"stage{s}.block0", width, ch, red, True, cfg.join_activation)
        for b in range(1, cfg.blocks[s - 1]):
            d.cg_block(f"stage{s}.block{b}", ch, ch, red, False, cfg.join_activation)
        width = 2 * ch + (cfg.input_channels if s < n_stages - 1 else 0)
        d.bn_act(f"stage{s}.out", width)
    for i in range(cfg.extra_conv_bn_relu_layers):
        d.conv_bn_act(f"head.extra{i}", width, width, 3, act="relu")
    d.conv("head.classifier", cfg.class_count, width, 1, bias=True)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d = _Declarer()
    _walk(cfg, d)
    return d.shapes


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(cfg).values()))


def init_model(cfg: ModelConfig) -> ModelParams:
    """Deterministic initialisation from ``cfg.seed``.

    Conv weights are uniform in ``+-sqrt(6 / fan_in)``; BN scale 1, shift 0;
    PReLU slopes 0.25; biases zero.
    """
    cfg.validate()
    d = _Declarer()
    _walk(cfg, d)
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in d.shapes.items():
        kind, fan_in = d.kinds[name]
        if kind == "uniform":
            bound = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "prelu":
            arr = np.full(shape, PRELU_INIT)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    buffers = {name: np.full(shape, fill) for name, (shape, fill) in d.buffers.items()}
    return ModelParams(params, buffers)


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------

class _Runner:
    def __init__(self, mp: ModelParams, training: bool):
        self.p = mp.params
        self.b = mp.buffers
        self.training = training

    def bn(self, name, x):
        return batchnorm2d(x, self.p[f"{name}.weight"], self.p[f"{name}.bias"],
                           self.b[f"{name}.running_mean"], self.b[f"{name}.running_var"],
                           self.training, BN_MOMENTUM, BN_EPS)

    def act(self, name, x, kind="prelu"):
        if kind == "prelu":
            return activation(x, "prelu", self.p[f"{name}.slope"])
        return relu(x)

    def conv_bn_act(self, name, x, stride=1, act="prelu"):
        w = self.p[f"{name}.conv.weight"]
        k = w.shape[2]
        y = conv2d(x, w, stride=stride, padding=(k - 1) // 2)
        return self.act(f"{name}.act", self.bn(f"{name}.bn", y), act)

    def bn_act(self, name, x, act="prelu"):
        return self.act(f"{name}.act", self.bn(f"{name}.bn", x), act)


def glo_gate(run: _Runner, name: str, x: Tensor) -> Tensor:
    """Per-channel gate in (0, 1), shape N x C x 1 x 1."""
    pooled = global_avg_pool(x)
    h = relu(conv2d(pooled, run.p[f"{name}.fc1.weight"], run.p[f"{name}.fc1.bias"]))
    return sigmoid(conv2d(h, run.p[f"{name}.fc2.weight"], run.p[f"{name}.fc2.bias"]))


def cg_block_forward(run: _Runner, name: str, x: Tensor, dilation: int, down: bool,
                     join_act: str = "prelu", residual: bool = False) -> Tensor:
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    xp = run.conv_bn_act(f"{name}.proj", x, stride=2 if down else 1)
    n = xp.shape[1]
    loc = conv2d(xp, run.p[f"{name}.loc.weight"], groups=n, padding=1)
    sur = conv2d(xp, run.p[f"{name}.sur.weight"], groups=n, dilation=dilation, padding=dilation)
    joined = run.bn_act(f"{name}.join", concat_channels(loc, sur), join_act)
    if down:
        joined = conv2d(joined, run.p[f"{name}.reduce.weight"])
    out = mul(joined, glo_gate(run, f"{name}.glo", joined))
    if residual and not down and x.shape == out.shape:
        out = add(out, x)
    return out


def _avg_pool_kernel(c: int) -> Tensor:
    return Tensor(np.full((c, 1, 3, 3), 1.0 / 9.0))


def forward_logits(x, mp: ModelParams, cfg: ModelConfig, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    n, c, h, w = x.shape
    if c != cfg.input_channels:
        raise DimensionError(f"model expects {cfg.input_channels} input channels, got {c}")
    if h % cfg.stride or w % cfg.stride:
        raise DimensionError(
            f"grid {h}x{w} must be divisible by the total downsampling factor {cfg.stride}")
    run = _Runner(mp, mode == "train")
    pool_k = _avg_pool_kernel(c)

    injected = conv2d(x, pool_k, stride=2, groups=c, padding=1)
    h1 = run.conv_bn_act("stem.0", x, stride=2)
    h1 = run.conv_bn_act("stem.1", h1)
    h1 = run.conv_bn_act("stem.2", h1)
    out = run.bn_act("stem.out", concat_channels(h1, injected))

    n_stages = len(cfg.stage_channels)
    for s in range(1, n_stages):
        d = cfg.dilations[s - 1]
        first = cg_block_forward(run, f"stage{s}.block0", out, d, True, cfg.join_activation)
        hb = first
        for b in range(1, cfg.blocks[s - 1]):
            hb = cg_block_forward(run, f"stage{s}.block{b}", hb, d, False, cfg.join_activation,
                                  cfg.residual)
        cat = concat_channels(hb, first)
        if s < n_stages - 1:
            injected = conv2d(injected, pool_k, stride=2, groups=c, padding=1)
            cat = concat_channels(cat, injected)
        out = run.bn_act(f"stage{s}.out", cat)

    for i in range(cfg.extra_conv_bn_relu_layers):
        out = run.conv_bn_act(f"head.extra{i}", out, act="relu")
    logits = conv2d(out, mp.params["head.classifier.weight"], mp.params["head.classifier.bias"])
    return upsample_bilinear(logits, cfg.final_upsample_factor)


def forward(x, mp: ModelParams, cfg: ModelConfig, mode: str = "eval") -> Tensor:
    """Class probabilities, N x 3 x H x W (an unbatched C x H x W input gets N = 1)."""
    return softmax_channels(forward_logits(x, mp, cfg, mode))


def predict_labels(probs) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return np.argmax(p, axis=-3).astype(np.uint8)


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
