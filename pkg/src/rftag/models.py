"""CP-ResNet variants: RF-regularized, frequency-aware, and shake-shake.

``build_model`` realizes a rho-sized CP-ResNet template as named parameter
tensors plus a forward recipe.  Variant flags thread through every residual
block: ``frequency_aware`` appends a per-bin coordinate channel to every conv
input, ``shake_shake`` doubles each block's transform branch and mixes the two
with random convex weights (independent weights on the backward pass).

Residual blocks are conv-bn-relu-conv-bn branches added to an identity skip
(1x1 conv + bn projection where the channel width changes); the classifier
head is global average pooling into a linear layer producing one logit per
tag.  Sigmoid lives downstream in the loss / evaluation layers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .rf import ArchSpec, RhoTemplate, apply_rho, compute_rf, cp_resnet_template

CKPT_MAGIC = b"RFCKPT01"


@dataclass
class TemplateConfig:
    """Structural knobs of the CP-ResNet template."""

    n_stages: int = 4
    blocks_per_stage: int = 3
    channel_plan: tuple = (32, 64, 128, 256)
    pool_stages: int = 2
    time_kernel: int = 3

    def make(self) -> RhoTemplate:
        return cp_resnet_template(self.n_stages, self.blocks_per_stage,
                                  tuple(self.channel_plan), self.pool_stages,
                                  time_kernel=self.time_kernel)


@dataclass
class ModelConfig:
    template: TemplateConfig = field(default_factory=TemplateConfig)
    rho: int = 4
    rho_time: Optional[int] = None
    frequency_aware: bool = False
    shake_shake: bool = False
    n_tags: int = 5
    input_bins: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_tags < 1:
            raise ValueError(f"n_tags must be >= 1, got {self.n_tags}")

    def arch(self) -> ArchSpec:
        return apply_rho(self.template.make(), self.rho, self.rho_time)


@dataclass
class ShakeDraw:
    """Forward/backward mixing coefficients for one shake block.

    Eval mode pins both coefficients at 0.5; train mode draws them
    independently uniform on [0, 1] per block per forward.
    """

    alpha: float = 0.5
    beta: float = 0.5
    mode: str = "eval"

    def __post_init__(self):
        if self.mode == "eval":
            self.alpha = 0.5
            self.beta = 0.5
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"shake coefficients must lie in [0, 1], got {self.alpha}, {self.beta}")

    @classmethod
    def train_draw(cls, rng: np.random.Generator) -> "ShakeDraw":
        return cls(alpha=float(rng.uniform()), beta=float(rng.uniform()), mode="train")


def fa_channel(x: Tensor) -> Tensor:
    """Append a frequency-coordinate channel: value f/(F-1) at bin f.

    Constant along batch and time; zero everywhere when F == 1.
    """
    n, c, f, t = x.shape
    coord_col = (np.arange(f, dtype=x.dtype) / (f - 1) if f > 1
                 else np.zeros(1, dtype=x.dtype))
    coord = np.broadcast_to(coord_col[None, None, :, None], (n, 1, f, t))
    out = np.concatenate([x.data, coord.astype(x.dtype)], axis=1)

    def vjp(gout):
        return (gout[:, :c],) if x.requires_grad else (None,)

    return ad.record("fa_channel", out, [x], vjp)


def shake_combine(b1: Tensor, b2: Tensor, draw: ShakeDraw) -> Tensor:
    """alpha*b1 + (1-alpha)*b2 forward; beta/(1-beta) gradient split backward."""
    if b1.shape != b2.shape:
        raise ValueError(f"shake branch shapes differ: {b1.shape} vs {b2.shape}")
    a, b = draw.alpha, draw.beta
    out = a * b1.data + (1.0 - a) * b2.data

    def vjp(gout):
        g1 = b * gout if b1.requires_grad else None
        g2 = (1.0 - b) * gout if b2.requires_grad else None
        return g1, g2

    return ad.record("shake_combine", out, [b1, b2], vjp)


def shake_block(x: Tensor, branch1: Callable, branch2: Callable, draw: ShakeDraw,
                skip: Optional[Callable] = None) -> Tensor:
    """skip(x) + alpha*branch1(x) + (1-alpha)*branch2(x)."""
    residual = x if skip is None else skip(x)
    mixed = shake_combine(branch1(x), branch2(x), draw)
    if residual.shape != mixed.shape:
        raise ValueError(f"branch output shape {mixed.shape} does not match "
                         f"skip shape {residual.shape}")
    return ad.add(residual, mixed)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class _Conv:
    def __init__(self, model: "Model", name: str, c_in: int, c_out: int,
                 kernel, stride=(1, 1), bias: bool = False):
        self.name = name
        self.stride = tuple(stride)
        kf, kt = kernel
        self.padding = ((kf - 1) // 2, (kt - 1) // 2)
        c_eff = c_in + (1 if model.config.frequency_aware else 0)
        fan_in = c_eff * kf * kt
        w = model.rng_init.standard_normal((c_out, c_eff, kf, kt)) * np.sqrt(2.0 / fan_in)
        self.weight = model.add_param(f"{name}.weight", w)
        self.bias = model.add_param(f"{name}.bias", np.zeros(c_out)) if bias else None
        self.fa = model.config.frequency_aware

    def __call__(self, x: Tensor) -> Tensor:
        if self.fa:
            x = fa_channel(x)
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class _BatchNorm:
    def __init__(self, model: "Model", name: str, channels: int):
        self.name = name
        self.gamma = model.add_param(f"{name}.gamma", np.ones(channels))
        self.beta = model.add_param(f"{name}.beta", np.zeros(channels))
        self.state = model.add_bn_state(name, channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.state, mode=mode)


class _ConvBN:
    def __init__(self, model, name, c_in, c_out, kernel, stride=(1, 1)):
        self.conv = _Conv(model, name, c_in, c_out, kernel, stride)
        self.bn = _BatchNorm(model, f"{name}.bn", c_out)

    def __call__(self, x, mode):
        return self.bn(self.conv(x), mode)


class _Branch:
    """conv-bn-relu-conv-bn transform of a residual block."""

    def __init__(self, model, name, c_in, c_out, kernels):
        (k1, k2) = kernels
        self.cb1 = _ConvBN(model, f"{name}.c1", c_in, c_out, k1)
        self.cb2 = _ConvBN(model, f"{name}.c2", c_out, c_out, k2)

    def __call__(self, x, mode):
        return self.cb2(ad.relu(self.cb1(x, mode)), mode)


class _Block:
    def __init__(self, model, name, c_in, c_out, kernels, shake: bool):
        self.name = name
        self.shake = shake
        self.branches = [_Branch(model, f"{name}.br1", c_in, c_out, kernels)]
        if shake:
            self.branches.append(_Branch(model, f"{name}.br2", c_in, c_out, kernels))
        self.proj = None
        if c_in != c_out:
            self.proj = _ConvBN(model, f"{name}.proj", c_in, c_out, (1, 1))

    def __call__(self, x, mode, rng: np.random.Generator):
        skip = x if self.proj is None else self.proj(x, mode)
        if self.shake:
            draw = ShakeDraw.train_draw(rng) if mode == "train" else ShakeDraw(mode="eval")
            mixed = shake_combine(self.branches[0](x, mode), self.branches[1](x, mode), draw)
        else:
            mixed = self.branches[0](x, mode)
        return ad.add(skip, mixed)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class Model:
    """Named parameters plus the forward recipe for one architecture."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.rng_init = np.random.default_rng(config.seed)
        self.rng_shake = np.random.default_rng(config.seed + 1)
        self._arch = config.arch()
        self._build()
        self._min_frames = self._compute_min_frames()
        del self.rng_init

    # -- construction ------------------------------------------------------

    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        t = Tensor(np.asarray(values, dtype=ad.DEFAULT_DTYPE), requires_grad=True)
        self.params[name] = t
        return t

    def add_bn_state(self, name: str, channels: int) -> BatchNormState:
        if name in self.bn_states:
            raise ValueError(f"duplicate batchnorm state name {name}")
        state = BatchNormState.identity(channels, dtype=ad.DEFAULT_DTYPE)
        self.bn_states[name] = state
        return state

    def _build(self):
        cfg = self.config
        tpl = cfg.template
        plan = tuple(tpl.channel_plan)
        kernels = {l.name: l.kernel for l in self._arch.layers}
        c0 = plan[0]
        self.in1 = _ConvBN(self, "in1", 1, c0, kernels["in1"], stride=(2, 2))
        self.in2 = _ConvBN(self, "in2", c0, c0, kernels["in2"])
        self.stages = []
        c_prev = c0
        for s in range(1, tpl.n_stages + 1):
            c_out = plan[s - 1]
            blocks = []
            for b in range(1, tpl.blocks_per_stage + 1):
                name = f"s{s}b{b}"
                blocks.append(_Block(self, name, c_prev, c_out,
                                     (kernels[f"{name}c1"], kernels[f"{name}c2"]),
                                     shake=cfg.shake_shake))
                c_prev = c_out
            self.stages.append((s <= tpl.pool_stages, blocks))
        fan_in = c_prev
        w = self.rng_init.standard_normal((fan_in, cfg.n_tags)) * np.sqrt(2.0 / fan_in)
        self.head_w = self.add_param("head.weight", w)
        self.head_b = self.add_param("head.bias", np.zeros(cfg.n_tags))

    # -- geometry ----------------------------------------------------------

    def arch_spec(self) -> ArchSpec:
        return self._arch

    def min_frames(self) -> int:
        """Smallest time extent the stride/pool plan can digest."""
        return self._min_frames

    def _compute_min_frames(self) -> int:
        for t in range(1, 4096):
            if self._frames_survive(t):
                return t
        raise RuntimeError("no feasible input length below 4096 frames")

    def _frames_survive(self, t: int) -> bool:
        arch = self._arch
        for layer in arch.layers:
            k, s, p = layer.kernel[1], layer.stride[1], layer.padding[1]
            if layer.kind == "pool":
                if k > t:
                    return False
                t = (t - k) // s + 1
            elif layer.kind == "conv":
                if k > t + 2 * p:
                    return False
                t = (t + 2 * p - k) // s + 1
        return t >= 1

    # -- forward -----------------------------------------------------------

    def forward_features(self, x: Tensor, mode: str = "eval",
                         pool_override: Optional[str] = None) -> Tensor:
        """Trunk feature map before global pooling."""
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input [N,1,bins,frames], got {x.shape}")
        if x.shape[2] != self.config.input_bins:
            raise ValueError(f"expected {self.config.input_bins} frequency bins, got {x.shape[2]}")
        need = self.min_frames()
        if x.shape[3] < need:
            raise ValueError(f"input has {x.shape[3]} frames but the stride plan "
                             f"needs at least {need}")
        pool_kind = pool_override or "max"
        h = ad.relu(self.in1(x, mode))
        h = ad.relu(self.in2(h, mode))
        for has_pool, blocks in self.stages:
            if has_pool:
                h = ad.pool2d(h, pool_kind, kernel=(2, 2), stride=(2, 2))
            for block in blocks:
                h = block(h, mode, self.rng_shake)
        return h

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Logits [N, n_tags]."""
        h = self.forward_features(x, mode)
        pooled = ad.pool2d(h, "global_avg")
        flat = ad.reshape(pooled, (x.shape[0], pooled.shape[1]))
        return ad.linear(flat, self.head_w, self.head_b)

    # -- parameter plumbing --------------------------------------------------

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of all parameters (used by SWA and checkpointing)."""
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise ValueError(f"missing parameter {k} in state")
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data = arrays[k].astype(p.data.dtype).copy()

    def bn_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn_states.items():
            out[f"{name}.mean"] = st.mean.copy()
            out[f"{name}.var"] = st.var.copy()
        return out

    def load_bn_arrays(self, arrays: dict) -> None:
        for name, st in self.bn_states.items():
            st.mean = arrays[f"{name}.mean"].astype(ad.DEFAULT_DTYPE).copy()
            st.var = arrays[f"{name}.var"].astype(ad.DEFAULT_DTYPE).copy()
            st.initialized = True


def build_model(config: ModelConfig) -> Model:
    """Deterministic He-initialized model for a config (same seed, same bits)."""
    return Model(config)


def parameter_count(model: Model, substring: str = "") -> int:
    return sum(p.size for name, p in model.params.items() if substring in name)


# ---------------------------------------------------------------------------
# connectivity measurement through the real model
# ---------------------------------------------------------------------------


def measure_model_rf(config: ModelConfig) -> tuple[int, int]:
    """Empirical RF of the built model via gradient connectivity.

    Rebuilds the model with all-positive weights, zero biases, identity BN
    statistics and average pooling (a max window's influence set is its whole
    window), then measures the nonzero-gradient extent of one central trunk
    unit per axis.
    """
    report = compute_rf(config.arch())
    jf = jt = 1
    for layer in config.arch().layers:
        jf *= layer.stride[0]
        jt *= layer.stride[1]
    fext = report.rf_freq + 2 * jf + 4
    text = report.rf_time + 2 * jt + 4

    probe_cfg = ModelConfig(template=config.template, rho=config.rho,
                            rho_time=config.rho_time,
                            frequency_aware=config.frequency_aware,
                            shake_shake=config.shake_shake,
                            n_tags=config.n_tags, input_bins=fext,
                            seed=config.seed)
    model = build_model(probe_cfg)
    for name, p in model.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            p.data = np.zeros_like(p.data)
        elif name.endswith(".gamma"):
            p.data = np.ones_like(p.data)
        else:
            p.data = np.full_like(p.data, 0.1)

    x = Tensor(np.ones((1, 1, fext, text), dtype=ad.DEFAULT_DTYPE), requires_grad=True)
    with ad.Tape():
        feats = model.forward_features(x, mode="eval", pool_override="avg")
        _, c, ho, wo = feats.shape
        mask = np.zeros(feats.shape, dtype=feats.dtype)
        mask[0, :, ho // 2, wo // 2] = 1.0
        loss = ad.sum_all(ad.mul(feats, Tensor(mask)))
    ad.backward(loss)
    grad = np.abs(x.grad[0, 0])
    f_hit = np.flatnonzero(grad.sum(axis=1) > 0)
    t_hit = np.flatnonzero(grad.sum(axis=0) > 0)
    return int(f_hit[-1] - f_hit[0] + 1), int(t_hit[-1] - t_hit[0] + 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack_entries(arrays: dict) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes())
    return b"".join(out)


def _unpack_entries(raw: bytes, pos: int) -> tuple[dict, int]:
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        arrays[name] = arr.copy()
    return arrays, pos


def config_echo(config: ModelConfig, extra: Optional[dict] = None) -> dict:
    echo = {
        "template.n_stages": str(config.template.n_stages),
        "template.blocks_per_stage": str(config.template.blocks_per_stage),
        "template.channel_plan": ",".join(str(c) for c in config.template.channel_plan),
        "template.pool_stages": str(config.template.pool_stages),
        "template.time_kernel": str(config.template.time_kernel),
        "rho": str(config.rho),
        "rho_time": "none" if config.rho_time is None else str(config.rho_time),
        "frequency_aware": str(config.frequency_aware),
        "shake_shake": str(config.shake_shake),
        "n_tags": str(config.n_tags),
        "input_bins": str(config.input_bins),
        "seed": str(config.seed),
    }
    if extra:
        echo.update({str(k): str(v) for k, v in extra.items()})
    return echo


def config_from_echo(echo: dict) -> ModelConfig:
    tpl = TemplateConfig(
        n_stages=int(echo["template.n_stages"]),
        blocks_per_stage=int(echo["template.blocks_per_stage"]),
        channel_plan=tuple(int(c) for c in echo["template.channel_plan"].split(",")),
        pool_stages=int(echo["template.pool_stages"]),
        time_kernel=int(echo["template.time_kernel"]),
    )
    rho_time = echo["rho_time"]
    return ModelConfig(
        template=tpl,
        rho=int(echo["rho"]),
        rho_time=None if rho_time == "none" else int(rho_time),
        frequency_aware=echo["frequency_aware"] == "True",
        shake_shake=echo["shake_shake"] == "True",
        n_tags=int(echo["n_tags"]),
        input_bins=int(echo["input_bins"]),
        seed=int(echo["seed"]),
    )


def save_checkpoint(path, model: Model, extra: Optional[dict] = None) -> None:
    """RFCKPT01: magic, parameter entries, BN running stats, config echo."""
    echo = config_echo(model.config, extra)
    echo_bytes = "\n".join(f"{k}={v}" for k, v in sorted(echo.items())).encode("utf-8")
    blob = (CKPT_MAGIC
            + _pack_entries(model.state_arrays())
            + _pack_entries(model.bn_arrays())
            + struct.pack("<I", len(echo_bytes)) + echo_bytes)
    Path(path).write_bytes(blob)


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns (parameter arrays, BN stat arrays, config echo dict)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}, expected {CKPT_MAGIC!r}")
    params, pos = _unpack_entries(raw, 8)
    bn, pos = _unpack_entries(raw, pos)
    (elen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    echo = {}
    for line in raw[pos:pos + elen].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            echo[k] = v
    return params, bn, echo


def load_model(path) -> tuple[Model, dict]:
    """Rebuild the model a checkpoint describes; returns (model, echo)."""
    params, bn, echo = read_checkpoint(path)
    model = build_model(config_from_echo(echo))
    model.load_state_arrays(params)
    model.load_bn_arrays(bn)
    return model, echo
