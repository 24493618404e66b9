"""Reverse-mode differentiation over the tensor-core op set.

Design: a :class:`Tape` is a linear record (Wengert list) of operations;
it is topologically ordered by construction because nodes are appended in
execution order.  A :class:`Var` is a handle onto one tape slot.  Each
traced op runs the forward routine from :mod:`egnet.ops` and attaches a
vector-Jacobian closure for the backward sweep.

The same functional wrappers accept plain tensors: with no :class:`Var`
among the arguments they just forward to :mod:`egnet.ops`, so model code
is written once and works for inference, training, and gradient checks.

Frozen leaves (the fixed classical kernels) receive no gradient entry,
but gradients still propagate *through* the ops that consume them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .errors import ConfigError, ContractError, VerificationError
from .tensor import Tensor


class _Node:
    __slots__ = ("op", "parents", "vjp", "needs_grad", "name", "frozen", "shape")

    def __init__(self, op, parents, vjp, needs_grad, name=None, frozen=False, shape=None):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.needs_grad = needs_grad
        self.name = name
        self.frozen = frozen
        self.shape = shape


class Tape:
    """Linear, append-only record of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[str, int] = {}

    def leaf(self, value, *, name: str | None = None, frozen: bool = False) -> "Var":
        """Register an input tensor; named leaves are gradient keys."""
        value = value if isinstance(value, Tensor) else Tensor(value)
        if name is not None:
            if name in self._leaves:
                raise ContractError(f"leaf {name!r} already on tape")
            self._leaves[name] = len(self.nodes)
        self.nodes.append(
            _Node("leaf", (), None, needs_grad=not frozen, name=name, frozen=frozen,
                  shape=value.shape)
        )
        return Var(self, len(self.nodes) - 1, value)

    def _record(self, op: str, value: Tensor, operands, vjp) -> "Var":
        parents = tuple(v.index for v in operands)
        needs = any(self.nodes[i].needs_grad for i in parents)
        self.nodes.append(_Node(op, parents, vjp, needs, shape=value.shape))
        return Var(self, len(self.nodes) - 1, value)


class Var:
    """Handle to one value on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: Tensor):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


def _value(x) -> Tensor | None:
    if x is None:
        return None
    return x.value if isinstance(x, Var) else (x if isinstance(x, Tensor) else Tensor(x))


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ContractError("operands come from different tapes")
            tape = x.tape
    return tape


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    # Constants enter as anonymous frozen leaves: no gradient flows to them.
    return tape.leaf(_value(x), frozen=True)


def backward(loss: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns gradients keyed by leaf name for every named, non-frozen leaf;
    leaves the loss does not reach get zero gradients.
    """
    if not isinstance(loss, Var):
        raise ContractError("backward requires a taped scalar (Var)")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss.index] = np.ones_like(loss.value.data)
    for idx in range(loss.index, -1, -1):
        node = nodes[idx]
        g = grads[idx]
        if g is None or node.vjp is None or not node.needs_grad:
            continue
        needed = tuple(nodes[p].needs_grad for p in node.parents)
        for p, pg in zip(node.parents, node.vjp(g, needed)):
            if pg is None:
                continue
            # Out-of-place accumulation: vjp outputs may alias upstream grads.
            grads[p] = pg if grads[p] is None else grads[p] + pg
    out: dict[str, np.ndarray] = {}
    for name, idx in tape._leaves.items():
        node = nodes[idx]
        if node.frozen:
            continue
        g = grads[idx]
        if g is None:
            g = np.zeros(node.shape, dtype=loss.value.dtype)
        out[name] = np.ascontiguousarray(g)
    return out


# ---------------------------------------------------------------------------
# Traced wrappers around the forward ops
# ---------------------------------------------------------------------------


def _scatter_windows(gwin, xshape, k, stride, p, padding):
    # Adjoint of the padded sliding-window extraction.
    n, c, h, w = xshape
    oh, ow = gwin.shape[2], gwin.shape[3]
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gwin.dtype)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += gwin[
                :, :, :, :, ki, kj
            ]
    return _unpad_grad(gxp, p, padding, h, w)


def _unpad_grad(gxp, p, padding, h, w):
    if p == 0:
        return gxp
    if padding == ops.ZERO:
        return np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w])
    # Replicate padding: border contributions fold back onto the edge
    # pixels they were copied from (rows first, then columns).
    gxp = gxp.copy()
    gxp[:, :, p, :] += gxp[:, :, :p, :].sum(axis=2)
    gxp[:, :, p + h - 1, :] += gxp[:, :, p + h :, :].sum(axis=2)
    rows = gxp[:, :, p : p + h, :]
    rows[:, :, :, p] += rows[:, :, :, :p].sum(axis=3)
    rows[:, :, :, p + w - 1] += rows[:, :, :, p + w :].sum(axis=3)
    return np.ascontiguousarray(rows[:, :, :, p : p + w])


def conv2d(x, weight, bias=None, *, stride: int = 1, padding: str = ops.ZERO):
    tape = _tape_of(x, weight, bias)
    y = ops.conv2d(_value(x), _value(weight), _value(bias), stride=stride, padding=padding)
    if tape is None:
        return y
    xv, wv = _lift(tape, x), _lift(tape, weight)
    bv = None if bias is None else _lift(tape, bias)
    xa, wa = xv.value.data, wv.value.data
    cout, cin, k, _ = wa.shape
    p = (k - 1) // 2

    def vjp(g, needed):
        n, _, oh, ow = g.shape
        gt = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if bv is not None and needed[2]:
            gb = g.sum(axis=(0, 2, 3))
        if needed[0] or needed[1]:
            win = ops._windows(ops._pad2d(xa, p, padding), k, stride)
            if needed[1]:
                cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cin * k * k)
                gw = (gt.T @ cols).reshape(cout, cin, k, k)
            if needed[0]:
                gcols = gt @ wa.reshape(cout, -1)
                gwin = gcols.reshape(n, oh, ow, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
                gx = _scatter_windows(gwin, xa.shape, k, stride, p, padding)
        return (gx, gw) if bv is None else (gx, gw, gb)

    operands = (xv, wv) if bv is None else (xv, wv, bv)
    return tape._record("conv2d", y, operands, vjp)


def depthwise_conv2d(x, kernel, *, stride: int = 1, padding: str = ops.ZERO):
    tape = _tape_of(x, kernel)
    y = ops.depthwise_conv2d(_value(x), _value(kernel), stride=stride, padding=padding)
    if tape is None:
        return y
    xv, kv = _lift(tape, x), _lift(tape, kernel)
    xa, ka = xv.value.data, kv.value.data
    shared = ka.ndim == 2
    k = ka.shape[-1]
    p = (k - 1) // 2

    def vjp(g, needed):
        gx = gk = None
        if needed[0] or needed[1]:
            win = ops._windows(ops._pad2d(xa, p, padding), k, stride)
            if needed[1]:
                if shared:
                    gk = np.einsum("nchwkl,nchw->kl", win, g)
                else:
                    gk = np.einsum("nchwkl,nchw->ckl", win, g)[:, None]
            if needed[0]:
                kk = ka if shared else ka[:, 0]
                if shared:
                    gwin = g[:, :, :, :, None, None] * kk[None, None, None, None]
                else:
                    gwin = g[:, :, :, :, None, None] * kk[None, :, None, None]
                gx = _scatter_windows(gwin, xa.shape, k, stride, p, padding)
        return gx, gk

    return tape._record("depthwise_conv2d", y, (xv, kv), vjp)


def conv1d_channels(v, weight):
    tape = _tape_of(v, weight)
    y = ops.conv1d_channels(_value(v), _value(weight))
    if tape is None:
        return y
    vv, wv = _lift(tape, v), _lift(tape, weight)
    va, wa = vv.value.data, wv.value.data
    squeeze = va.ndim == 1
    v2 = va[None, :] if squeeze else va
    k = wa.shape[0]
    p = k // 2

    def vjp(g, needed):
        g2 = g[None, :] if squeeze else g
        gv = gw = None
        if needed[0]:
            gp = np.pad(g2, ((0, 0), (p, p)))
            gv = sliding_window_view(gp, k, axis=1) @ wa[::-1]
            if squeeze:
                gv = gv[0]
        if needed[1]:
            vp = np.pad(v2, ((0, 0), (p, p)))
            gw = np.einsum("nck,nc->k", sliding_window_view(vp, k, axis=1), g2)
        return gv, gw

    return tape._record("conv1d_channels", y, (vv, wv), vjp)


def maxpool2d(x):
    tape = _tape_of(x)
    y = ops.maxpool2d(_value(x))
    if tape is None:
        return y
    xv = _lift(tape, x)
    xa = xv.value.data
    n, c, h, w = xa.shape
    oh, ow = h // 2, w // 2

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        v = xa[:, :, : oh * 2, : ow * 2].reshape(n, c, oh, 2, ow, 2)
        flat = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = flat.argmax(axis=-1)
        rows = idx // 2 + 2 * np.arange(oh).reshape(1, 1, oh, 1)
        cols = idx % 2 + 2 * np.arange(ow).reshape(1, 1, 1, ow)
        gx = np.zeros_like(xa)
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        gx[nn, cc, rows, cols] = g
        return (gx,)

    return tape._record("maxpool2d", y, (xv,), vjp)


def global_avg_pool(x):
    tape = _tape_of(x)
    y = ops.global_avg_pool(_value(x))
    if tape is None:
        return y
    xv = _lift(tape, x)
    n, c, h, w = xv.value.shape

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return tape._record("global_avg_pool", y, (xv,), vjp)


def batchnorm2d(x, scale, shift, *, mode="batch", mean=None, var=None, eps=ops.BN_EPS):
    tape = _tape_of(x, scale, shift, mean, var)
    y = ops.batchnorm2d(
        _value(x), _value(scale), _value(shift), mode=mode,
        mean=_value(mean), var=_value(var), eps=eps,
    )
    if tape is None:
        return y
    xv, sv, bv = _lift(tape, x), _lift(tape, scale), _lift(tape, shift)
    xa, sa = xv.value.data, sv.value.data

    if mode == "batch":
        _, xhat, inv = ops._batchnorm_batch_raw(xa, sa, bv.value.data, eps)
        m = xa.shape[0] * xa.shape[2] * xa.shape[3]

        def vjp(g, needed):
            gx = gs = gb = None
            if needed[2]:
                gb = g.sum(axis=(0, 2, 3))
            if needed[1]:
                gs = (g * xhat).sum(axis=(0, 2, 3))
            if needed[0]:
                dxhat = g * sa[None, :, None, None]
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv[None, :, None, None] * (dxhat - s1 / m - xhat * s2 / m)
            return gx, gs, gb

        return tape._record("batchnorm2d", y, (xv, sv, bv), vjp)

    mv, vv = _lift(tape, mean), _lift(tape, var)
    ma, va = mv.value.data, vv.value.data
    inv = 1.0 / np.sqrt(va + eps)
    xhat = (xa - ma[None, :, None, None]) * inv[None, :, None, None]

    def vjp(g, needed):
        gx = gs = gb = gm = gv = None
        gsum = g.sum(axis=(0, 2, 3))
        if needed[2]:
            gb = gsum
        if needed[1]:
            gs = (g * xhat).sum(axis=(0, 2, 3))
        if needed[0]:
            gx = g * (sa * inv)[None, :, None, None]
        if needed[3]:
            gm = -sa * inv * gsum
        if needed[4]:
            gv = -0.5 * sa * inv * inv * (g * xhat).sum(axis=(0, 2, 3))
        return gx, gs, gb, gm, gv

    return tape._record("batchnorm2d", y, (xv, sv, bv, mv, vv), vjp)


def gelu(x):
    tape = _tape_of(x)
    y = ops.gelu(_value(x))
    if tape is None:
        return y
    xv = _lift(tape, x)
    xa = xv.value.data

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        u = ops._GELU_C * (xa + 0.044715 * xa * xa * xa)
        t = np.tanh(u)
        du = ops._GELU_C * (1.0 + 3.0 * 0.044715 * xa * xa)
        return (g * (0.5 * (1.0 + t) + 0.5 * xa * (1.0 - t * t) * du),)

    return tape._record("gelu", y, (xv,), vjp)


def sigmoid(x):
    tape = _tape_of(x)
    y = ops.sigmoid(_value(x))
    if tape is None:
        return y
    xv = _lift(tape, x)
    ya = y.data

    def vjp(g, needed):
        return (g * ya * (1.0 - ya),) if needed[0] else (None,)

    return tape._record("sigmoid", y, (xv,), vjp)


def add(a, b):
    tape = _tape_of(a, b)
    y = ops.add(_value(a), _value(b))
    if tape is None:
        return y
    av, bv = _lift(tape, a), _lift(tape, b)

    def vjp(g, needed):
        return (g if needed[0] else None, g if needed[1] else None)

    return tape._record("add", y, (av, bv), vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    y = ops.mul(_value(a), _value(b))
    if tape is None:
        return y
    av, bv = _lift(tape, a), _lift(tape, b)
    aa, ba = av.value.data, bv.value.data

    def vjp(g, needed):
        return (g * ba if needed[0] else None, g * aa if needed[1] else None)

    return tape._record("mul", y, (av, bv), vjp)


def scale_channels(x, gates):
    tape = _tape_of(x, gates)
    y = ops.scale_channels(_value(x), _value(gates))
    if tape is None:
        return y
    xv, gv = _lift(tape, x), _lift(tape, gates)
    xa, ga = xv.value.data, gv.value.data

    def vjp(g, needed):
        gx = g * ga[:, :, None, None] if needed[0] else None
        gg = (g * xa).sum(axis=(2, 3)) if needed[1] else None
        return gx, gg

    return tape._record("scale_channels", y, (xv, gv), vjp)


def sqrt_eps(x, eps: float = ops.SQRT_EPS):
    tape = _tape_of(x)
    y = ops.sqrt_eps(_value(x), eps)
    if tape is None:
        return y
    xv = _lift(tape, x)
    ya = y.data  # y = sqrt(x + eps) > 0, so the slope 1/(2y) stays finite

    def vjp(g, needed):
        return (g * (0.5 / ya),) if needed[0] else (None,)

    return tape._record("sqrt_eps", y, (xv,), vjp)


def dropout(x, rate: float, *, training: bool, rng=None):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        # Identity contract, bit-exact in both taped and plain paths.
        return x if isinstance(x, Var) else ops.dropout(x, rate, training=False)
    if rng is None:
        raise ContractError("training-mode dropout requires a seeded generator")
    tape = _tape_of(x)
    val = _value(x)
    mask = ops._dropout_mask(val.shape, rate, rng, val.dtype)
    y = Tensor._wrap(val.data * mask)
    if tape is None:
        return y
    xv = _lift(tape, x)

    def vjp(g, needed):
        return (g * mask,) if needed[0] else (None,)

    return tape._record("dropout", y, (xv,), vjp)


def sum_all(x):
    tape = _tape_of(x)
    y = ops.sum_all(_value(x))
    if tape is None:
        return y
    xv = _lift(tape, x)
    shape = xv.value.shape

    def vjp(g, needed):
        if not needed[0]:
            return (None,)
        return (np.full(shape, g[()], dtype=g.dtype),)

    return tape._record("sum_all", y, (xv,), vjp)


def scale(x, alpha: float):
    tape = _tape_of(x)
    xa = _value(x).data
    y = Tensor._wrap(xa * xa.dtype.type(alpha))
    if tape is None:
        return y
    xv = _lift(tape, x)

    def vjp(g, needed):
        return (g * alpha,) if needed[0] else (None,)

    return tape._record("scale", y, (xv,), vjp)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

REL_FLOOR = 1e-8  # denominator guard in the relative-error metric


@dataclass
class GradReport:
    """Comparison of analytic gradients against central differences."""

    eps: float
    dtype: str
    coords_per_tensor: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def lines(self) -> list[str]:
        out = [f"param={name} max_rel_err={err:.6e}" for name, err in self.per_param.items()]
        out.append(
            f"gradcheck max_rel_err={self.max_rel_error:.6e} eps={self.eps:g} "
            f"dtype={self.dtype} coords={self.coords_per_tensor}"
        )
        return out


def finite_diff_check(
    loss_fn,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    *,
    eps: float = 1e-5,
    seed: int = 0,
    coords_per_tensor: int = 200,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps an override dict ``{name: array}`` to a float loss and
    must be a pure function of the parameter values.  For each parameter
    tensor a random subsample of coordinates (all of them when the tensor
    is small) is perturbed by ``+/- eps``.  This path is the independent
    oracle: it never touches the tape.
    """
    rng = np.random.default_rng(seed)
    report = GradReport(eps=eps, dtype=str(next(iter(params.values())).dtype) if params else "float64",
                        coords_per_tensor=coords_per_tensor)
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        ana = analytic.get(name)
        ana = np.zeros_like(base) if ana is None else np.asarray(ana)
        if ana.shape != base.shape:
            raise VerificationError(
                f"analytic gradient for {name} has shape {ana.shape}, expected {base.shape}",
                param=name,
            )
        size = base.size
        if size <= coords_per_tensor:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=coords_per_tensor, replace=False)
        work = base.copy()
        worst = 0.0
        for coord in coords:
            orig = work.flat[coord]
            work.flat[coord] = orig + eps
            lo_hi = loss_fn({name: work})
            work.flat[coord] = orig - eps
            lo_lo = loss_fn({name: work})
            work.flat[coord] = orig
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise VerificationError(
                    f"non-finite loss while perturbing {name}[{coord}]",
                    param=name,
                    coord=int(coord),
                )
            numeric = (lo_hi - lo_lo) / (2.0 * eps)
            a = float(ana.flat[coord])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            if rel > worst:
                worst = rel
        report.per_param[name] = worst
    return report
