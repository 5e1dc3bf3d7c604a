"""Analytic receptive-field calculus for layered CNN architectures.

Tracks, per axis (frequency f, time t), the receptive field r and the jump j
(product of strides) through a chain of layers with optional residual skip
edges: r_n = r_{n-1} + (k_n - 1) * j_{n-1}, j_n = j_{n-1} * s_n, seeded at
r = j = 1.  Residual merges take the elementwise maximum over incoming
paths.  ``empirical_rf`` validates the calculus by measuring gradient
connectivity through an actual instantiation of the architecture.

``apply_rho`` realizes receptive-field regularization: of the ordered
adjustable conv slots, the first rho keep frequency-kernel 3 and the rest
drop to 1, which caps how far the frequency RF can grow.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad

LAYER_KINDS = ("conv", "pool", "elementwise", "block_entry", "block_exit")


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one layer; elementwise/marker layers are RF-neutral."""

    name: str
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    adjustable: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.name}: unknown kind {self.kind!r}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"layer {self.name}: kernel and stride must be >= 1 per axis")
        if self.kind in ("elementwise", "block_entry", "block_exit"):
            if self.kernel != (1, 1) or self.stride != (1, 1):
                raise ValueError(f"layer {self.name}: {self.kind} layers must have kernel=stride=1")


@dataclass
class ArchSpec:
    """An ordered layer chain plus residual skip edges (from -> to by name).

    A skip edge adds the output of layer ``from`` to the output of layer
    ``to``; ``from`` must precede ``to``, which keeps the graph acyclic with
    a single source and sink.
    """

    layers: list
    skips: list = field(default_factory=list)
    input_bins: int = 256
    channel_plan: tuple = ()

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate layer names: {dup}")
        index = {n: i for i, n in enumerate(names)}
        for src, dst in self.skips:
            if src not in index or dst not in index:
                raise ValueError(f"skip {src}->{dst} references unknown layers")
            if index[src] >= index[dst]:
                raise ValueError(f"skip {src}->{dst} is not forward (graph would be cyclic)")

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(name)

    def adjustable_layers(self) -> list:
        return [l for l in self.layers if l.adjustable]


@dataclass
class RFRow:
    name: str
    r_freq: int
    j_freq: int
    r_time: int
    j_time: int


@dataclass
class RFReport:
    """Per-layer receptive fields and the final per-axis values at the sink."""

    rows: list
    rf_freq: int
    rf_time: int

    def as_table(self) -> str:
        width = max([len("layer")] + [len(r.name) for r in self.rows])
        lines = [f"{'layer':<{width}}  {'rf_f':>6} {'jump_f':>6} {'rf_t':>6} {'jump_t':>6}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.r_freq:>6} {r.j_freq:>6} {r.r_time:>6} {r.j_time:>6}")
        lines.append(f"final receptive field: freq={self.rf_freq} time={self.rf_time}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        lines = ["layer,rf_freq,jump_freq,rf_time,jump_time"]
        for r in self.rows:
            lines.append(f"{r.name},{r.r_freq},{r.j_freq},{r.r_time},{r.j_time}")
        return "\n".join(lines) + "\n"


def compute_rf(arch: ArchSpec) -> RFReport:
    """Propagate (r, j) per axis through the chain, max-merging at skips."""
    skips_into: dict[str, list[str]] = {}
    for src, dst in arch.skips:
        skips_into.setdefault(dst, []).append(src)

    state: dict[str, tuple[int, int, int, int]] = {}
    prev = (1, 1, 1, 1)  # r_f, j_f, r_t, j_t at the input
    rows = []
    for layer in arch.layers:
        rf, jf, rt, jt = prev
        kf, kt = layer.kernel
        sf, st = layer.stride
        rf = rf + (kf - 1) * jf
        rt = rt + (kt - 1) * jt
        jf = jf * sf
        jt = jt * st
        for src in skips_into.get(layer.name, ()):
            s_rf, s_jf, s_rt, s_jt = state[src]
            rf, jf = max(rf, s_rf), max(jf, s_jf)
            rt, jt = max(rt, s_rt), max(jt, s_jt)
        prev = (rf, jf, rt, jt)
        state[layer.name] = prev
        rows.append(RFRow(layer.name, rf, jf, rt, jt))
    rf, jf, rt, jt = prev
    return RFReport(rows=rows, rf_freq=rf, rf_time=rt)


# ---------------------------------------------------------------------------
# gradient-connectivity oracle
# ---------------------------------------------------------------------------


def empirical_rf(arch: ArchSpec, axis: str, input_extents: Optional[tuple] = None) -> int:
    """Receptive field measured as gradient connectivity through autodiff.

    Builds the architecture with single-channel convs, all-one weights and no
    nonlinearity, takes one central unit of the sink output, and measures the
    extent of input positions with nonzero gradient along ``axis``.  Pools are
    instantiated as average pools: any element of a max window can influence
    the output under perturbation, so the avg backward measures the true
    influence set that a single max subgradient undercounts.  Pool padding is
    ignored (padding shifts extents, never connectivity span).
    """
    if axis not in ("freq", "time"):
        raise ValueError(f"axis must be 'freq' or 'time', got {axis!r}")
    report = compute_rf(arch)
    extents = _pick_extents(arch, report, input_extents)
    fext, text = extents
    if fext <= report.rf_freq or text <= report.rf_time:
        raise ValueError(
            f"input {extents} too small: must be strictly larger than the analytic "
            f"receptive field ({report.rf_freq}, {report.rf_time})")
    grad = _connectivity_gradient(arch, fext, text)
    if axis == "freq":
        hit = np.flatnonzero(np.abs(grad).sum(axis=1) > 0)
    else:
        hit = np.flatnonzero(np.abs(grad).sum(axis=0) > 0)
    return int(hit[-1] - hit[0] + 1)


def _pick_extents(arch, report, input_extents):
    if input_extents is not None:
        return input_extents
    # jump product for margin so that the central unit's span stays interior
    jf = jt = 1
    for l in arch.layers:
        jf *= l.stride[0]
        jt *= l.stride[1]
    return report.rf_freq + 2 * jf + 4, report.rf_time + 2 * jt + 4


def _connectivity_gradient(arch: ArchSpec, fext: int, text: int) -> np.ndarray:
    x = ad.Tensor(np.ones((1, 1, fext, text), dtype=np.float64), requires_grad=True)
    skips_into: dict[str, list[str]] = {}
    for src, dst in arch.skips:
        skips_into.setdefault(dst, []).append(src)
    with ad.Tape():
        outputs: dict[str, ad.Tensor] = {}
        cur = x
        for layer in arch.layers:
            if layer.kind == "conv":
                kf, kt = layer.kernel
                w = ad.Tensor(np.ones((1, 1, kf, kt), dtype=np.float64))
                cur = ad.conv2d(cur, w, stride=layer.stride, padding=layer.padding)
            elif layer.kind == "pool":
                cur = ad.pool2d(cur, "avg", kernel=layer.kernel, stride=layer.stride)
            # elementwise / markers: identity
            for src in skips_into.get(layer.name, ()):
                cur = ad.add(cur, outputs[src])
            outputs[layer.name] = cur
        _, _, ho, wo = cur.shape
        mask = np.zeros((1, 1, ho, wo), dtype=np.float64)
        mask[0, 0, ho // 2, wo // 2] = 1.0
        loss = ad.sum_all(ad.mul(cur, ad.Tensor(mask)))
    ad.backward(loss)
    grad = x.grad[0, 0]
    support_f = np.flatnonzero(np.abs(grad).sum(axis=1) > 0)
    support_t = np.flatnonzero(np.abs(grad).sum(axis=0) > 0)
    if (support_f[0] == 0 or support_f[-1] == fext - 1
            or support_t[0] == 0 or support_t[-1] == text - 1):
        # support touched the border, central unit was not interior: grow
        return _connectivity_gradient(arch, fext + fext // 2, text + text // 2)
    return grad


# ---------------------------------------------------------------------------
# rho templates
# ---------------------------------------------------------------------------


@dataclass
class RhoTemplate:
    """Base architecture whose adjustable conv slots are sized by rho.

    The first ``rho`` adjustable slots keep frequency-kernel 3, the rest get
    frequency-kernel 1.  Time kernels stay at the template's value unless an
    independent ``rho_time`` is supplied.
    """

    base: ArchSpec
    name: str = "cp_resnet"

    @property
    def n_adjustable(self) -> int:
        return len(self.base.adjustable_layers())


def apply_rho(template: RhoTemplate, rho: int, rho_time: Optional[int] = None) -> ArchSpec:
    """Realize a template at a given rho (and optional independent rho_time)."""
    n = template.n_adjustable
    if not (0 <= rho <= n):
        raise ValueError(f"rho must lie in [0, {n}], got {rho}")
    if rho_time is not None and not (0 <= rho_time <= n):
        raise ValueError(f"rho_time must lie in [0, {n}], got {rho_time}")
    new_layers = []
    slot = 0
    for layer in template.base.layers:
        if layer.adjustable and layer.kind == "conv":
            kf = 3 if slot < rho else 1
            kt = layer.kernel[1] if rho_time is None else (3 if slot < rho_time else 1)
            new_layers.append(replace(layer,
                                      kernel=(kf, kt),
                                      padding=((kf - 1) // 2, (kt - 1) // 2)))
            slot += 1
        else:
            new_layers.append(layer)
    return ArchSpec(layers=new_layers, skips=list(template.base.skips),
                    input_bins=template.base.input_bins,
                    channel_plan=template.base.channel_plan)


def max_rho_for_budget(template: RhoTemplate, rf_budget_freq: int,
                       rho_time: Optional[int] = None) -> int:
    """Largest rho whose frequency RF stays within the budget (monotone scan)."""
    floor = compute_rf(apply_rho(template, 0, rho_time)).rf_freq
    if rf_budget_freq < floor:
        raise ValueError(
            f"budget {rf_budget_freq} is below the rho=0 receptive field {floor}")
    best = 0
    for rho in range(1, template.n_adjustable + 1):
        if compute_rf(apply_rho(template, rho, rho_time)).rf_freq <= rf_budget_freq:
            best = rho
        else:
            break
    return best


def cp_resnet_template(n_stages: int = 4, blocks_per_stage: int = 3,
                       channel_plan: tuple = (32, 64, 128, 256),
                       pool_stages: int = 2, input_bins: int = 256,
                       time_kernel: int = 3) -> RhoTemplate:
    """The default CP-ResNet-style template.

    Input stage of two 3x3 convs (stride (2,2) then (1,1)), then ``n_stages``
    stages of ``blocks_per_stage`` residual blocks with two adjustable convs
    each; the first ``pool_stages`` stages open with a 2x2 max pool.
    """
    if len(channel_plan) != n_stages:
        raise ValueError(f"channel plan {channel_plan} must list one width per stage ({n_stages})")
    layers = [
        LayerSpec("in1", "conv", (3, 3), (2, 2), (1, 1)),
        LayerSpec("in2", "conv", (3, 3), (1, 1), (1, 1)),
    ]
    skips = []
    prev = "in2"
    for s in range(1, n_stages + 1):
        if s <= pool_stages:
            name = f"s{s}_pool"
            layers.append(LayerSpec(name, "pool", (2, 2), (2, 2)))
            prev = name
        for b in range(1, blocks_per_stage + 1):
            c1 = f"s{s}b{b}c1"
            c2 = f"s{s}b{b}c2"
            layers.append(LayerSpec(c1, "conv", (3, time_kernel), (1, 1),
                                    (1, (time_kernel - 1) // 2), adjustable=True))
            layers.append(LayerSpec(c2, "conv", (3, time_kernel), (1, 1),
                                    (1, (time_kernel - 1) // 2), adjustable=True))
            skips.append((prev, c2))
            prev = c2
    base = ArchSpec(layers=layers, skips=skips, input_bins=input_bins,
                    channel_plan=tuple(channel_plan))
    return RhoTemplate(base=base)


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def arch_to_text(arch: ArchSpec) -> str:
    """One layer per line: ``name kind kf,kt sf,st pf,pt adjustable``."""
    lines = [f"input_bins {arch.input_bins}"]
    if arch.channel_plan:
        lines.append("channels " + ",".join(str(c) for c in arch.channel_plan))
    for l in arch.layers:
        lines.append(f"{l.name} {l.kind} {l.kernel[0]},{l.kernel[1]} "
                     f"{l.stride[0]},{l.stride[1]} {l.padding[0]},{l.padding[1]} "
                     f"{1 if l.adjustable else 0}")
    for src, dst in arch.skips:
        lines.append(f"skip {src}->{dst}")
    return "\n".join(lines) + "\n"


def arch_from_text(text: str) -> ArchSpec:
    layers = []
    skips = []
    input_bins = 256
    channel_plan = ()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "input_bins":
                input_bins = int(parts[1])
            elif parts[0] == "channels":
                channel_plan = tuple(int(c) for c in parts[1].split(","))
            elif parts[0] == "skip":
                src, dst = parts[1].split("->")
                skips.append((src, dst))
            else:
                name, kind, k, s, p, adj = parts
                pair = lambda v: tuple(int(a) for a in v.split(","))
                layers.append(LayerSpec(name, kind, pair(k), pair(s), pair(p),
                                        adjustable=adj not in ("0", "false", "False")))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}: {exc}") from None
    return ArchSpec(layers=layers, skips=skips, input_bins=input_bins,
                    channel_plan=channel_plan)


def save_arch(path, arch: ArchSpec) -> None:
    Path(path).write_text(arch_to_text(arch))


def load_arch(path) -> ArchSpec:
    return arch_from_text(Path(path).read_text())
