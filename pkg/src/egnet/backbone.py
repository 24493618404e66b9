"""The edge-Gaussian backbone: stem, downsampling, and LEG blocks.

Architecture summary (Tiny: C=32, Small: C=64; block counts [1, 4, 4, 2]):

* LoG stem: a learnable 7x7 conv (3->3) filtered by a fixed 7x7
  Laplacian-of-Gaussian, added back onto the image through a residual
  norm; then 3x3 convs down to half resolution, a pair of fixed Gaussian
  smoothers (9x9 and 5x5, sigma 0.5), and a DRFD down to stride 4 / width C.
* DRFD downsampling: a stride-2 3x3 conv branch plus a maxpool + 1x1 conv
  branch, summed and passed through norm + GELU.  Doubles width, halves
  the spatial extent.
* LEG block (shape preserving): an EGA module (edge attention in stage 1,
  Gaussian attention in stages 2-4, fused through a conv block and gated
  multiplication) followed by ECA channel gating, then a 1x1 expand
  (C->2C), 1x1 reduce (2C->C), dropout, norm, and a residual add.

Stage outputs form a four-level feature pyramid at strides 4/8/16/32 with
widths C, 2C, 4C, 8C.

Parameter naming is part of the weight-file contract; see the README for
the full table.  Fixed classical kernels appear once under ``fixed.*``
and are shared by every consumer.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import _fast
from . import autograd as ag
from . import ops
from .autograd import GradReport, Tape, finite_diff_check
from .errors import ConfigError, ContractError, DimensionError
from .kernels import gaussian_kernel, log_kernel, scharr_kernels
from .tensor import DEFAULT_DTYPE, Tensor

VARIANTS = {"tiny": 32, "small": 64}

_INITS = ("he_normal", "ones", "zeros", "fixed_kernel")


@dataclass(frozen=True)
class BackboneConfig:
    """Variant hyper-parameters; everything downstream derives from these."""

    variant: str
    width: int
    blocks: tuple[int, int, int, int] = (1, 4, 4, 2)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    eca_gamma: int = 2
    eca_beta: int = 1
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected tiny or small")
        if self.width != VARIANTS[self.variant]:
            raise ConfigError(
                f"variant {self.variant!r} has base width {VARIANTS[self.variant]}, got {self.width}"
            )

    @classmethod
    def for_variant(cls, variant: str) -> "BackboneConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected tiny or small")
        return cls(variant=variant, width=VARIANTS[variant])

    @property
    def stage_widths(self) -> tuple[int, int, int, int]:
        c = self.width
        return (c, 2 * c, 4 * c, 8 * c)

    @property
    def attention_kinds(self) -> tuple[str, str, str, str]:
        # Edge attention only where the resolution still carries edges.
        return ("edge", "gauss", "gauss", "gauss")


@dataclass(frozen=True)
class Param:
    """One named learnable or fixed array."""

    name: str
    value: Tensor
    frozen: bool
    init: str

    def __post_init__(self):
        if self.init not in _INITS:
            raise ConfigError(f"unknown init {self.init!r}")
        if self.frozen != (self.init == "fixed_kernel"):
            raise ContractError(f"param {self.name}: frozen flag must mirror fixed_kernel init")

    @property
    def is_stat(self) -> bool:
        # Running statistics ride along with the weights but are neither
        # learnable nor frozen classical kernels.
        return self.name.endswith(".mean") or self.name.endswith(".var")


class Model:
    """A built backbone: config plus ordered named parameters."""

    def __init__(self, config: BackboneConfig, params: dict[str, Param]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def astype(self, dtype) -> "Model":
        cast = {
            n: Param(p.name, p.value.astype(dtype), p.frozen, p.init)
            for n, p in self.params.items()
        }
        return Model(self.config, cast)

    def with_values(self, overrides: dict[str, np.ndarray]) -> "Model":
        """Copy of the model with some parameter values replaced (tests, surgery)."""
        out = dict(self.params)
        for name, arr in overrides.items():
            p = out[name]
            t = Tensor(np.asarray(arr, dtype=p.value.dtype))
            if t.shape != p.value.shape:
                raise DimensionError(
                    f"override for {name} has shape {t.shape}, expected {p.value.shape}"
                )
            out[name] = Param(p.name, t, p.frozen, p.init)
        return Model(self.config, out)

    def learnable_items(self):
        for name, p in self.params.items():
            if not p.frozen and not p.is_stat:
                yield name, p

    def learnable_count(self) -> int:
        return sum(p.value.size for _, p in self.learnable_items())


@dataclass
class FeaturePyramid:
    """The four stage outputs at strides 4/8/16/32."""

    levels: tuple

    STRIDES = (4, 8, 16, 32)

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ContractError(f"feature pyramid needs exactly 4 levels, got {len(self.levels)}")


class Mode:
    """Forward-pass mode: which norm statistics and whether dropout is live.

    Dropout masks derive from ``(dropout_seed, block tag)``, so the same
    seed reproduces them exactly, independent of execution order.
    """

    def __init__(self, stats: str = "running", dropout_seed: int | None = None):
        if stats not in ("running", "batch"):
            raise ConfigError(f"mode stats must be 'running' or 'batch', got {stats!r}")
        self.stats = stats
        self.dropout_seed = dropout_seed

    @property
    def training(self) -> bool:
        return self.dropout_seed is not None

    def dropout_rng(self, tag: str) -> np.random.Generator:
        return np.random.default_rng([self.dropout_seed, zlib.crc32(tag.encode("ascii"))])

    def fresh(self) -> "Mode":
        return Mode(self.stats, self.dropout_seed)


class ParamView:
    """Uniform parameter accessor for plain, overridden, and taped forwards.

    Taped access registers each parameter exactly once as a (possibly
    frozen) named leaf; repeated lookups return the same Var.
    """

    def __init__(self, model: Model, tape: Tape | None = None, overrides=None):
        self._model = model
        self._tape = tape
        self._overrides = overrides or {}
        self._cache = {}

    def __call__(self, name: str):
        hit = self._cache.get(name)
        if hit is not None:
            return hit
        p = self._model.params[name]
        if name in self._overrides:
            value = Tensor(np.asarray(self._overrides[name], dtype=p.value.dtype))
        else:
            value = p.value
        out = value if self._tape is None else self._tape.leaf(value, name=name, frozen=p.frozen)
        self._cache[name] = out
        return out


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

FIXED_KERNEL_SPECS = {
    "fixed.log7": ("log", 7, 1.0),
    "fixed.gauss9_s05": ("gaussian", 9, 0.5),
    "fixed.gauss5_s05": ("gaussian", 5, 0.5),
    "fixed.gauss5_s10": ("gaussian", 5, 1.0),
    "fixed.scharr_x": ("scharr_x", 3, None),
    "fixed.scharr_y": ("scharr_y", 3, None),
}


def eca_kernel_size(channels: int, gamma: int = 2, beta: int = 1) -> int:
    """Channel-adaptive 1-D kernel size: log2(C)/gamma + beta/gamma, odd-rounded.

    Rounds to the nearest odd integer, ties toward the larger one.
    """
    if channels < 2:
        raise ConfigError(f"eca_kernel_size needs at least 2 channels, got {channels}")
    t = math.log2(channels) / gamma + beta / gamma
    lo = 2 * math.floor((t - 1.0) / 2.0) + 1
    if lo < 1:
        lo = 1
    hi = lo + 2
    return hi if (t - lo) >= (hi - t) else lo


def _generate_fixed(name: str) -> np.ndarray:
    kind, size, sigma = FIXED_KERNEL_SPECS[name]
    if kind == "gaussian":
        return gaussian_kernel(size, sigma)
    if kind == "log":
        return log_kernel(size, sigma)
    sx, sy = scharr_kernels()
    return sx if kind == "scharr_x" else sy


def build_model(config: BackboneConfig, seed: int = 0) -> Model:
    """Materialize every layer with named, seeded parameters.

    Learnable conv weights are He-normal (std = sqrt(2 / fan_in)) drawn in
    parameter order from one seeded generator, so a seed fully determines
    the model bytes.  Norm layers start as identity (scale 1, shift 0,
    running mean 0, var 1).  Fixed classical kernels are frozen.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Param] = {}

    def put(name, arr, frozen=False, init="he_normal"):
        if name in params:
            raise ContractError(f"duplicate parameter name {name}")
        params[name] = Param(name, Tensor(np.asarray(arr, dtype=DEFAULT_DTYPE)), frozen, init)

    def conv(name, cout, cin, k):
        std = math.sqrt(2.0 / (cin * k * k))
        put(name, rng.normal(0.0, std, size=(cout, cin, k, k)))

    def dwconv(name, c, k):
        std = math.sqrt(2.0 / (k * k))
        put(name, rng.normal(0.0, std, size=(c, 1, k, k)))

    def vec(name, k):
        std = math.sqrt(2.0 / k)
        put(name, rng.normal(0.0, std, size=(k,)))

    def norm(prefix, c):
        put(prefix + ".scale", np.ones(c), init="ones")
        put(prefix + ".shift", np.zeros(c), init="zeros")
        put(prefix + ".mean", np.zeros(c), init="zeros")
        put(prefix + ".var", np.ones(c), init="ones")

    def drfd(prefix, cin):
        conv(prefix + ".conv3", 2 * cin, cin, 3)
        norm(prefix + ".norm_conv.norm", 2 * cin)
        conv(prefix + ".conv1", 2 * cin, cin, 1)
        norm(prefix + ".norm_pool.norm", 2 * cin)
        norm(prefix + ".an.norm", 2 * cin)

    for name in FIXED_KERNEL_SPECS:
        put(name, _generate_fixed(name), frozen=True, init="fixed_kernel")

    c = config.width
    half = c // 2
    conv("stem.conv7", 3, 3, 7)
    norm("stem.an_log.norm", 3)
    norm("stem.res.norm", 3)
    conv("stem.conv3", half, 3, 3)
    conv("stem.convd3", half, half, 3)
    norm("stem.mid.norm", half)
    drfd("stem.drfd", half)

    widths = config.stage_widths
    for i in range(1, 5):
        w = widths[i - 1]
        if i > 1:
            drfd(f"s{i}.drfd", widths[i - 2])
        k = eca_kernel_size(w, config.eca_gamma, config.eca_beta)
        for j in range(1, config.blocks[i - 1] + 1):
            b = f"s{i}.b{j}"
            conv(b + ".ega.convblock.c1", w, w, 1)
            norm(b + ".ega.convblock.an1.norm", w)
            dwconv(b + ".ega.convblock.c3", w, 3)
            norm(b + ".ega.convblock.an2.norm", w)
            conv(b + ".ega.convblock.c2", w, w, 1)
            norm(b + ".ega.convblock.out.norm", w)
            conv(b + ".ega.conv3", w, w, 3)
            vec(b + ".eca.w", k)
            norm(b + ".leg.norm", w)
            conv(b + ".expand", 2 * w, w, 1)
            norm(b + ".an.norm", 2 * w)
            conv(b + ".reduce", w, 2 * w, 1)
            norm(b + ".out.norm", w)

    return Model(config, params)


def param_breakdown(model: Model) -> dict[str, dict[str, int]]:
    """Per-group (fixed/stem/s1..s4) counts of learnable, stat, and frozen values."""
    groups: dict[str, dict[str, int]] = {}
    for name, p in model.params.items():
        group = name.split(".", 1)[0]
        slot = groups.setdefault(group, {"learnable": 0, "stats": 0, "frozen": 0})
        if p.frozen:
            slot["frozen"] += p.value.size
        elif p.is_stat:
            slot["stats"] += p.value.size
        else:
            slot["learnable"] += p.value.size
    return groups


# ---------------------------------------------------------------------------
# Forward graph
# ---------------------------------------------------------------------------


def _peek(x) -> Tensor:
    # Underlying tensor of either a plain Tensor or a taped Var.
    return x.value if hasattr(x, "value") else x


def _norm(x, pview, prefix, cfg, mode):
    if mode.stats == "batch":
        return ag.batchnorm2d(
            x, pview(prefix + ".scale"), pview(prefix + ".shift"),
            mode="batch", eps=cfg.bn_eps,
        )
    return ag.batchnorm2d(
        x, pview(prefix + ".scale"), pview(prefix + ".shift"),
        mode="running", mean=pview(prefix + ".mean"), var=pview(prefix + ".var"),
        eps=cfg.bn_eps,
    )


def _an(x, pview, prefix, cfg, mode):
    # Norm first, then GELU.
    return ag.gelu(_norm(x, pview, prefix, cfg, mode))


def _edge_attention(x, sx, sy):
    gx = ag.depthwise_conv2d(x, sx, padding=ops.REPLICATE)
    gy = ag.depthwise_conv2d(x, sy, padding=ops.REPLICATE)
    return ag.sqrt_eps(ag.add(ag.mul(gx, gx), ag.mul(gy, gy)))


def _gaussian_attention(x, g5):
    return ag.depthwise_conv2d(x, g5, padding=ops.REPLICATE)


def edge_attention(x) -> Tensor:
    """Gradient-magnitude map from the Scharr pair, shape preserving."""
    if not isinstance(x, Tensor) and not hasattr(x, "value"):
        x = Tensor(x)
    dt = _peek(x).dtype
    sx, sy = scharr_kernels()
    return _edge_attention(x, Tensor(sx.astype(dt)), Tensor(sy.astype(dt)))


def gaussian_attention(x) -> Tensor:
    """Fixed 5x5 sigma-1 Gaussian smoothing, one kernel shared per channel."""
    if not isinstance(x, Tensor) and not hasattr(x, "value"):
        x = Tensor(x)
    dt = _peek(x).dtype
    g5 = gaussian_kernel(5, 1.0).astype(dt)
    return _gaussian_attention(x, Tensor(g5))


def drfd_forward(x, pview, prefix, cfg, mode):
    """Two-branch downsampling: stride-2 conv + (maxpool, 1x1 conv), summed."""
    val = _peek(x)
    if val.h % 2 or val.w % 2:
        raise DimensionError(
            f"DRFD needs even spatial dims, got {val.h}x{val.w}", axis="h"
        )
    cpath = ag.conv2d(x, pview(prefix + ".conv3"), stride=2)
    cpath = _norm(cpath, pview, prefix + ".norm_conv.norm", cfg, mode)
    ppath = ag.conv2d(ag.maxpool2d(x), pview(prefix + ".conv1"))
    ppath = _norm(ppath, pview, prefix + ".norm_pool.norm", cfg, mode)
    return _an(ag.add(cpath, ppath), pview, prefix + ".an.norm", cfg, mode)


def log_stem_forward(x, pview, cfg, mode):
    """Stem: LoG-enhanced residual, two 3x3 convs to stride 2, Gaussian pair, DRFD."""
    val = _peek(x)
    if val.h % 4 or val.w % 4:
        raise DimensionError(
            f"stem needs spatial dims divisible by 4, got {val.h}x{val.w}", axis="h"
        )
    t = ag.conv2d(x, pview("stem.conv7"))
    t = ag.depthwise_conv2d(t, pview("fixed.log7"), padding=ops.REPLICATE)
    t = _an(t, pview, "stem.an_log.norm", cfg, mode)
    f_log = _norm(ag.add(x, t), pview, "stem.res.norm", cfg, mode)
    t = ag.conv2d(f_log, pview("stem.conv3"))
    f1 = ag.conv2d(t, pview("stem.convd3"), stride=2)
    t = ag.depthwise_conv2d(f1, pview("fixed.gauss9_s05"), padding=ops.REPLICATE)
    t = _norm(ag.add(t, f1), pview, "stem.mid.norm", cfg, mode)
    t = ag.depthwise_conv2d(t, pview("fixed.gauss5_s05"), padding=ops.REPLICATE)
    return drfd_forward(t, pview, "stem.drfd", cfg, mode)


def conv_block_forward(x, pview, prefix, cfg, mode):
    """1x1 conv, AN, depthwise 3x3, AN, 1x1 conv, norm; width stays fixed."""
    t = ag.conv2d(x, pview(prefix + ".c1"))
    t = _an(t, pview, prefix + ".an1.norm", cfg, mode)
    t = ag.depthwise_conv2d(t, pview(prefix + ".c3"))
    t = _an(t, pview, prefix + ".an2.norm", cfg, mode)
    t = ag.conv2d(t, pview(prefix + ".c2"))
    return _norm(t, pview, prefix + ".out.norm", cfg, mode)


def _stage_attention(x, stage, pview, cfg):
    if not 1 <= stage <= 4:
        raise ConfigError(f"stage must be in 1..4, got {stage}")
    if cfg.attention_kinds[stage - 1] == "edge":
        return _edge_attention(x, pview("fixed.scharr_x"), pview("fixed.scharr_y"))
    return _gaussian_attention(x, pview("fixed.gauss5_s10"))


def ega_forward(x, stage, pview, prefix, cfg, mode, trace=None):
    """Edge/Gaussian attention fused with the input through a conv block."""
    a = _stage_attention(x, stage, pview, cfg)
    if trace is not None:
        trace[prefix + ".attention"] = _peek(a)
    fa = conv_block_forward(ag.add(x, a), pview, prefix + ".convblock", cfg, mode)
    return ag.conv2d(ag.add(ag.mul(x, fa), x), pview(prefix + ".conv3"))


def leg_module_forward(x, stage, pview, prefix, cfg, mode, trace=None):
    """EGA features gated per channel (ECA) and folded back onto the input."""
    f_ega = ega_forward(x, stage, pview, prefix + ".ega", cfg, mode, trace)
    gates = ag.sigmoid(ag.conv1d_channels(ag.global_avg_pool(f_ega), pview(prefix + ".eca.w")))
    return _norm(
        ag.add(ag.scale_channels(f_ega, gates), x), pview, prefix + ".leg.norm", cfg, mode
    )


def leg_block_forward(x, stage, pview, prefix, cfg, mode, trace=None):
    """Shape-preserving block: LEG module, 1x1 expand/reduce, dropout, residual."""
    t = leg_module_forward(x, stage, pview, prefix, cfg, mode, trace)
    t = ag.conv2d(t, pview(prefix + ".expand"))
    t = _an(t, pview, prefix + ".an.norm", cfg, mode)
    t = ag.conv2d(t, pview(prefix + ".reduce"))
    t = ag.dropout(
        t,
        cfg.dropout_rate,
        training=mode.training,
        rng=mode.dropout_rng(prefix) if mode.training else None,
    )
    t = _norm(t, pview, prefix + ".out.norm", cfg, mode)
    return ag.add(x, t)


def _pyramid_forward(x, pview, cfg, mode, trace=None, skip_blocks=False):
    t = log_stem_forward(x, pview, cfg, mode)
    levels = []
    for i in range(1, 5):
        if i > 1:
            t = drfd_forward(t, pview, f"s{i}.drfd", cfg, mode)
        if not skip_blocks:
            for j in range(1, cfg.blocks[i - 1] + 1):
                t = leg_block_forward(t, i, pview, f"s{i}.b{j}", cfg, mode, trace)
        levels.append(t)
    return FeaturePyramid(tuple(levels))


def backbone_forward(x, model: Model, mode: Mode | None = None, trace: dict | None = None,
                     skip_blocks: bool = False) -> FeaturePyramid:
    """Run the full backbone; returns the four-level feature pyramid.

    ``trace`` (optional dict) collects each block's attention map under
    ``s{i}.b{j}.ega.attention``.  ``skip_blocks`` runs only the stem/DRFD
    spine, which is the reference pipeline for residual-identity checks.
    """
    if mode is None:
        mode = Mode()
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.c != 3:
        raise DimensionError(f"backbone input must be (n, 3, h, w), got {x.shape}", axis="c")
    if x.h % 32 or x.w % 32:
        raise DimensionError(
            f"backbone input spatial dims must be divisible by 32, got {x.h}x{x.w}",
            axis="h",
        )
    pview = ParamView(model)
    return _pyramid_forward(x, pview, model.config, mode.fresh(), trace, skip_blocks)


# ---------------------------------------------------------------------------
# Whole-model gradient checking
# ---------------------------------------------------------------------------


# Scale on the gradcheck loss.  The relative-error metric floors its
# denominator at 1e-8, so two absolute error sources in the central
# difference must sit well below 1e-12 (tolerance 1e-4 times the floor):
# float cancellation noise (~1e-13 for an O(10^3) sum, aliased through
# /2eps to ~1e-8) and O(eps^2) truncation bias on low-gradient/high-
# curvature coordinates (observed up to ~4e-6 unscaled).  Scaling the
# loss scales signal and both error sources alike; 1e-7 parks the errors
# two-plus orders of magnitude under the floor while typical gradients
# stay far above it, where the comparison remains strict.
LOSS_SCALE = 1e-7


def _pyramid_loss(levels) -> object:
    total = None
    for lvl in levels:
        s = ag.sum_all(lvl)
        total = s if total is None else ag.add(total, s)
    return ag.scale(total, LOSS_SCALE)


class _FastPipeline:
    """Raw-array forward used as the finite-difference loss function.

    Shares the exact ``_raw`` kernels with :mod:`egnet.ops` (same math,
    same operation order as the taped forward) but skips tensor wrapping
    and validation.  Because a perturbed parameter only influences the
    network from the segment that consumes it onward, the baseline run
    caches every segment input and the level sums accumulated before it;
    each loss evaluation then re-runs only a suffix.
    """

    def __init__(self, model: Model, x: Tensor, mode: Mode):
        if mode.stats != "batch":
            raise ContractError("fast pipeline supports batch-statistics mode only")
        self.A = {n: p.value.data for n, p in model.params.items()}
        self.cfg = model.config
        self._jit = _fast.HAVE_NUMBA and x.shape[0] == 1 and x.dtype == np.float64
        if self._jit:
            _fast.warmup(np.float64)
        self._masks = {}
        if mode.training:
            widths = self.cfg.stage_widths
            n, _, h, w = x.shape
            sizes = {1: (h // 4, w // 4), 2: (h // 8, w // 8), 3: (h // 16, w // 16),
                     4: (h // 32, w // 32)}
            for i in range(1, 5):
                for j in range(1, self.cfg.blocks[i - 1] + 1):
                    tag = f"s{i}.b{j}"
                    shape = (n, widths[i - 1], *sizes[i])
                    self._masks[tag] = ops._dropout_mask(
                        shape, self.cfg.dropout_rate, mode.dropout_rng(tag), x.dtype
                    )
        self._steps = []           # (fn, tap) in execution order
        self._seg_of = {}          # parameter name -> step index
        self._build_steps()
        for name in self.A:
            if name not in self._seg_of:
                self._seg_of[name] = 0  # fixed kernels: conservative (never perturbed)
        self._inputs = []
        self._prefix_sums = []
        t = x.data
        acc = 0.0
        for fn, tap in self._steps:
            self._inputs.append(t)
            self._prefix_sums.append(acc)
            t = fn(t)
            if tap:
                acc += float(t.sum())
        self.baseline = acc * LOSS_SCALE

    # -- step construction ---------------------------------------------------

    def _bn(self, t, prefix, fuse_gelu=False):
        if self._jit:
            c = t.shape[1]
            y = _fast.bn_batch(
                t.reshape(c, -1), self.A[prefix + ".scale"], self.A[prefix + ".shift"],
                self.cfg.bn_eps, fuse_gelu,
            )
            return y.reshape(t.shape)
        y, _, _ = ops._batchnorm_batch_raw(
            t, self.A[prefix + ".scale"], self.A[prefix + ".shift"], self.cfg.bn_eps
        )
        return ops._gelu_raw(y) if fuse_gelu else y

    def _an(self, t, prefix):
        return self._bn(t, prefix, fuse_gelu=True)

    def _conv(self, t, name, stride=1):
        if self._jit:
            return _fast.conv2d_n1(t, self.A[name], stride)
        return ops._conv2d_raw(t, self.A[name], None, stride, ops.ZERO)

    def _dw_shared(self, t, name):
        if self._jit:
            return _fast.dw_shared(t[0], self.A[name], True)[None]
        return ops._depthwise_raw(t, self.A[name], 1, ops.REPLICATE)

    def _dw_perchannel(self, t, name):
        if self._jit:
            return _fast.dw_perchannel3(t[0], self.A[name])[None]
        return ops._depthwise_raw(t, self.A[name], 1, ops.ZERO)

    def _stem_fn(self, t):
        z = self._conv(t, "stem.conv7")
        z = self._dw_shared(z, "fixed.log7")
        z = self._an(z, "stem.an_log.norm")
        f_log = self._bn(t + z, "stem.res.norm")
        z = self._conv(f_log, "stem.conv3")
        f1 = self._conv(z, "stem.convd3", stride=2)
        z = self._dw_shared(f1, "fixed.gauss9_s05")
        z = self._bn(z + f1, "stem.mid.norm")
        z = self._dw_shared(z, "fixed.gauss5_s05")
        return self._drfd(z, "stem.drfd")

    def _drfd(self, t, prefix):
        cpath = self._bn(self._conv(t, prefix + ".conv3", stride=2), prefix + ".norm_conv.norm")
        ppath = self._bn(
            self._conv(ops._maxpool_raw(t), prefix + ".conv1"), prefix + ".norm_pool.norm"
        )
        return self._bn(cpath + ppath, prefix + ".an.norm", fuse_gelu=True)

    def _block_fn(self, prefix, stage):
        A = self.A
        edge = self.cfg.attention_kinds[stage - 1] == "edge"
        mask = self._masks.get(prefix)

        def fn(t):
            if edge:
                gx = self._dw_shared(t, "fixed.scharr_x")
                gy = self._dw_shared(t, "fixed.scharr_y")
                a = np.sqrt((gx * gx + gy * gy) + ops.SQRT_EPS)
            else:
                a = self._dw_shared(t, "fixed.gauss5_s10")
            z = self._conv(t + a, prefix + ".ega.convblock.c1")
            z = self._an(z, prefix + ".ega.convblock.an1.norm")
            z = self._dw_perchannel(z, prefix + ".ega.convblock.c3")
            z = self._an(z, prefix + ".ega.convblock.an2.norm")
            z = self._conv(z, prefix + ".ega.convblock.c2")
            fa = self._bn(z, prefix + ".ega.convblock.out.norm")
            f_ega = self._conv(t * fa + t, prefix + ".ega.conv3")
            gates = ops._sigmoid_raw(ops._conv1d_raw(ops._gap_raw(f_ega), A[prefix + ".eca.w"]))
            z = self._bn(f_ega * gates[:, :, None, None] + t, prefix + ".leg.norm")
            z = self._conv(z, prefix + ".expand")
            z = self._an(z, prefix + ".an.norm")
            z = self._conv(z, prefix + ".reduce")
            if mask is not None:
                z = z * mask
            z = self._bn(z, prefix + ".out.norm")
            return t + z

        return fn

    def _build_steps(self):
        def claim(prefix, index):
            for name in self.A:
                if name.startswith(prefix + "."):
                    self._seg_of[name] = index

        self._steps.append((self._stem_fn, False))
        claim("stem", 0)
        for i in range(1, 5):
            if i > 1:
                idx = len(self._steps)
                pre = f"s{i}.drfd"
                self._steps.append((lambda t, p=pre: self._drfd(t, p), False))
                claim(pre, idx)
            for j in range(1, self.cfg.blocks[i - 1] + 1):
                idx = len(self._steps)
                pre = f"s{i}.b{j}"
                tap = j == self.cfg.blocks[i - 1]
                self._steps.append((self._block_fn(pre, i), tap))
                claim(pre, idx)

    # -- evaluation ------------------------------------------------------------

    def loss(self, overrides: dict) -> float:
        (name, arr), = overrides.items()
        old = self.A[name]
        self.A[name] = np.asarray(arr)
        try:
            start = self._seg_of[name]
            t = self._inputs[start]
            acc = self._prefix_sums[start]
            for fn, tap in self._steps[start:]:
                t = fn(t)
                if tap:
                    acc += float(t.sum())
            return acc * LOSS_SCALE
        finally:
            self.A[name] = old


def backbone_gradcheck(
    model: Model,
    x: Tensor,
    *,
    eps: float = 1e-5,
    seed: int = 0,
    coords_per_tensor: int = 200,
) -> GradReport:
    """Verify analytic gradients of sum(pyramid) against central differences.

    Runs in float64 with batch-statistics norms and a frozen, seed-derived
    dropout mask per block, per the verification contract.  Only learnable
    parameters are checked; frozen kernels have no gradient entries to
    check and running statistics are unused in batch mode.
    """
    m64 = model.astype(np.float64)
    x64 = x.astype(np.float64)
    cfg = m64.config
    mode = Mode(stats="batch", dropout_seed=seed)

    tape = Tape()
    pview = ParamView(m64, tape=tape)
    xv = tape.leaf(x64, name="input")
    pyramid = _pyramid_forward(xv, pview, cfg, mode.fresh())
    loss = _pyramid_loss(pyramid.levels)
    analytic = ag.backward(loss)

    fast = _FastPipeline(m64, x64, mode.fresh())
    taped_loss = float(loss.value.data)
    if not math.isclose(fast.baseline, taped_loss, rel_tol=1e-9, abs_tol=1e-9):
        raise ContractError(
            f"fast pipeline loss {fast.baseline!r} diverges from taped loss {taped_loss!r}"
        )

    params = {name: p.value.data for name, p in m64.learnable_items()}
    return finite_diff_check(
        fast.loss, params, analytic, eps=eps, seed=seed, coords_per_tensor=coords_per_tensor
    )
