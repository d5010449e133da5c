"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the fusion and texture networks need are provided.
Arrays are float32 for training and inference; casting every parameter to
float64 gives the shadow mode used by :func:`grad_check`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ContractError",
    "Node",
    "parameter",
    "constant",
    "backward",
    "add",
    "scalar_mul",
    "mul",
    "relu",
    "concat_channels",
    "reshape",
    "sum_all",
    "l1_loss",
    "conv2d",
    "conv3d",
    "unfold2d",
    "fold2d",
    "normalize_rows",
    "matmul_nt",
    "max_last",
    "rowmax_nt",
    "gather_rows",
    "AdamState",
    "adam_step",
    "Adam",
    "GradCheckReport",
    "grad_check",
    "inject_gradient_fault",
]

MAX_RANK = 5
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


# Debug hook: names of operations whose backward pass is deliberately wrong.
_FAULTS: set[str] = set()


def inject_gradient_fault(op: str | None) -> None:
    """Corrupt the backward pass of ``op`` (``None`` clears all faults).

    Only meant for negative-control tests of the gradient checker.
    """
    if op is None:
        _FAULTS.clear()
    else:
        _FAULTS.add(op)


class Node:
    """A value in the differentiable graph.

    ``grad`` is only populated on leaves (nodes without parents) and is
    accumulated across :func:`backward` calls until reset with
    :meth:`zero_grad`.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_fn: Callable | None = None,
        requires_grad: bool | None = None,
        name: str | None = None,
    ):
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float32)
        if value.ndim > MAX_RANK:
            raise ShapeError(f"rank {value.ndim} exceeds maximum rank {MAX_RANK}")
        bad = [ax for ax, n in enumerate(value.shape) if n < 1]
        if bad:
            raise ShapeError(f"axes {bad} have zero extent in shape {value.shape}")
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, copy=True), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Calling this twice without :meth:`Node.zero_grad` doubles the leaf
    gradients.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.grad is None:
                node.grad = g.astype(node.value.dtype, copy=True)
            else:
                node.grad = node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.value.dtype)
            if pg.shape != p.shape:
                raise ContractError(
                    f"gradient shape {pg.shape} does not match value shape {p.shape}"
                )
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- elementwise


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        axes = [i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n]
        if len(a.shape) != len(b.shape):
            raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ on axes {axes}")


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("add", a, b)
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def scalar_mul(a, c: float) -> Node:
    a = _node(a)
    c = float(c)
    return Node(a.value * a.value.dtype.type(c), (a,), lambda g: (g * c,))


def _broadcast_axis(big: tuple, small: tuple) -> int | None:
    if len(big) != len(small):
        return None
    diff = [i for i, (m, n) in enumerate(zip(big, small)) if m != n]
    if len(diff) == 1 and small[diff[0]] == 1:
        return diff[0]
    return None


def mul(a, b) -> Node:
    """Elementwise product.

    Either operand may be a single-channel map: it may differ from the other
    operand only by having extent 1 on one axis, and is broadcast along it.
    """
    a, b = _node(a), _node(b)
    if a.shape == b.shape:
        return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))
    axis = _broadcast_axis(a.shape, b.shape)
    if axis is not None:
        return Node(
            a.value * b.value,
            (a, b),
            lambda g: (g * b.value, np.sum(g * a.value, axis=axis, keepdims=True)),
        )
    axis = _broadcast_axis(b.shape, a.shape)
    if axis is not None:
        return Node(
            a.value * b.value,
            (a, b),
            lambda g: (np.sum(g * b.value, axis=axis, keepdims=True), g * a.value),
        )
    _same_shape("mul", a, b)
    raise AssertionError("unreachable")


def relu(a) -> Node:
    a = _node(a)
    mask = a.value > 0

    def bw(g):
        gi = g * mask
        if "relu" in _FAULTS:
            gi = gi * 1.5
        return (gi,)

    return Node(a.value * mask, (a,), bw)


def concat_channels(nodes: Sequence, axis: int = -3) -> Node:
    """Concatenate along the channel axis (``-3`` for ``[..., C, H, W]`` maps)."""
    nodes = [_node(n) for n in nodes]
    ref = list(nodes[0].shape)
    ax = axis % len(ref)
    for n in nodes[1:]:
        other = list(n.shape)
        if len(other) != len(ref) or any(
            i != ax and p != q for i, (p, q) in enumerate(zip(ref, other))
        ):
            raise ShapeError(
                f"concat_channels: {tuple(ref)} and {tuple(other)} differ outside axis {ax}"
            )
    sizes = np.cumsum([n.shape[ax] for n in nodes])[:-1]
    out = np.concatenate([n.value for n in nodes], axis=ax)
    return Node(out, nodes, lambda g: tuple(np.split(g, sizes, axis=ax)))


def reshape(a, shape: Sequence[int]) -> Node:
    a = _node(a)
    old = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a) -> Node:
    a = _node(a)
    return Node(a.value.sum(), (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def l1_loss(pred, target) -> Node:
    """Mean absolute difference; the subgradient at a zero difference is 0."""
    pred, target = _node(pred), _node(target)
    _same_shape("l1_loss", pred, target)
    diff = pred.value - target.value
    n = diff.size
    sign = np.sign(diff)
    return Node(np.abs(diff).mean(), (pred, target), lambda g: (g * sign / n, -g * sign / n))


# ---------------------------------------------------------------- convolution


def _pad(x: np.ndarray, pads: Sequence[int], mode: str) -> np.ndarray:
    lead = x.ndim - len(pads)
    width = [(0, 0)] * lead + [(p, p) for p in pads]
    if mode == "zero":
        return np.pad(x, width, mode="constant")
    return np.pad(x, width, mode="reflect")


def _pad_adjoint(g: np.ndarray, pads: Sequence[int], mode: str) -> np.ndarray:
    lead = g.ndim - len(pads)
    for k, p in enumerate(pads):
        if p == 0:
            continue
        ax = lead + k
        g = np.moveaxis(g, ax, 0)
        n = g.shape[0] - 2 * p
        out = g[p : p + n].copy()
        if mode == "reflect":
            out[1 : p + 1] += g[0:p][::-1]
            out[n - 1 - p : n - 1] += g[p + n :][::-1]
        g = np.moveaxis(out, 0, ax)
    return g


def _check_padding(mode: str, spatial: Sequence[int], pads: Sequence[int]) -> None:
    if mode not in ("zero", "reflect"):
        raise ValueError(f"padding mode must be 'zero' or 'reflect', got {mode!r}")
    if mode == "reflect":
        for n, p in zip(spatial, pads):
            if p >= n:
                raise ShapeError(f"reflect padding {p} needs spatial extent > {p}, got {n}")


def _convnd(x, w, b, padding: str, nd: int, op: str) -> Node:
    x, w = _node(x), _node(w)
    b = None if b is None else _node(b)
    batched = x.value.ndim == nd + 2
    if x.value.ndim not in (nd + 1, nd + 2):
        raise ShapeError(f"{op}: input must be [Cin,{nd} spatial] or batched, got {x.shape}")
    if w.value.ndim != nd + 2:
        raise ShapeError(f"{op}: kernel must have rank {nd + 2}, got {w.shape}")
    xv = x.value if batched else x.value[None]
    cin = xv.shape[1]
    cout = w.shape[0]
    ksize = w.shape[2:]
    if w.shape[1] != cin:
        raise ShapeError(f"{op}: input channel axis has {cin}, kernel axis 1 has {w.shape[1]}")
    even = [i + 2 for i, k in enumerate(ksize) if k % 2 == 0]
    if even:
        raise ShapeError(f"{op}: kernel axes {even} must be odd, got {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"{op}: bias shape {b.shape} does not match Cout={cout}")
    spatial = xv.shape[2:]
    pads = [k // 2 for k in ksize]
    _check_padding(padding, spatial, pads)

    bsz = xv.shape[0]
    ktaps = int(np.prod(ksize))
    npos = int(np.prod(spatial))
    xp = _pad(xv, pads, padding)
    win = sliding_window_view(xp, ksize, axis=tuple(range(2, 2 + nd)))  # [B, Cin, *S, *K]
    perm = (0, 1) + tuple(range(2 + nd, 2 + 2 * nd)) + tuple(range(2, 2 + nd))
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(bsz, cin * ktaps, npos)
    wmat = w.value.reshape(cout, cin * ktaps)
    out = wmat @ cols  # [B, Cout, S]
    if b is not None:
        out += b.value.reshape(1, cout, 1)
    out = out.reshape((bsz, cout) + tuple(spatial))

    def bw(g):
        gb = (g if batched else g[None]).reshape(bsz, cout, npos)
        gw = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gbias = None if b is None else gb.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gb).reshape((bsz, cin) + tuple(ksize) + tuple(spatial))
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for off in itertools.product(*(range(k) for k in ksize)):
                sl = (slice(None), slice(None)) + tuple(
                    slice(o, o + n) for o, n in zip(off, spatial)
                )
                gxp[sl] += dcols[(slice(None), slice(None)) + off]
            gx = _pad_adjoint(gxp, pads, padding)
            if not batched:
                gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gbias)
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Node(out if batched else out[0], parents, bw)


def conv2d(x, kernel, bias=None, padding: str = "zero") -> Node:
    """Same-size 2D cross-correlation.

    ``x`` is ``[Cin, H, W]`` or ``[B, Cin, H, W]``; ``kernel`` is
    ``[Cout, Cin, kh, kw]`` with odd spatial extents.
    """
    return _convnd(x, kernel, bias, padding, 2, "conv2d")


def conv3d(x, kernel, bias=None, padding: str = "zero") -> Node:
    """Same-size 3D cross-correlation on ``[Cin, D, H, W]`` (optionally batched)."""
    return _convnd(x, kernel, bias, padding, 3, "conv3d")


# ---------------------------------------------------------------- patch ops


def unfold2d(x, p: int = 3) -> Node:
    """One ``C*p*p`` patch per pixel of ``[B, C, H, W]`` features.

    Features are reflect-padded by ``p // 2``. Patches are ordered row-major
    by center pixel; inside a patch the order is (channel, dy, dx).
    """
    x = _node(x)
    if x.value.ndim != 4:
        raise ShapeError(f"unfold2d: expected [B, C, H, W], got {x.shape}")
    if p % 2 == 0:
        raise ShapeError(f"unfold2d: patch size must be odd, got {p}")
    bsz, c, h, w = x.shape
    r = p // 2
    _check_padding("reflect", (h, w), (r, r))
    xp = _pad(x.value, (r, r), "reflect")
    win = sliding_window_view(xp, (p, p), axis=(2, 3))  # [B, C, H, W, p, p]
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz, h * w, c * p * p)

    def bw(g):
        g6 = g.reshape(bsz, h, w, c, p, p).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for dy in range(p):
            for dx in range(p):
                gxp[:, :, dy : dy + h, dx : dx + w] += g6[..., dy, dx]
        return (_pad_adjoint(gxp, (r, r), "reflect"),)

    return Node(out, (x,), bw)


def fold2d(patches, channels: int, height: int, width: int, p: int = 3) -> Node:
    """Average overlapping patches back onto a ``[B, C, H, W]`` grid.

    Contributions that land in the padding border are dropped; each pixel is
    divided by the number of patches covering it (``p*p`` in the interior).
    """
    patches = _node(patches)
    bsz, n, d = patches.shape
    if n != height * width or d != channels * p * p:
        raise ShapeError(
            f"fold2d: patches {patches.shape} incompatible with C={channels}, "
            f"H={height}, W={width}, p={p}"
        )
    r = p // 2

    def scatter(g6, dtype):
        canvas = np.zeros((g6.shape[0], channels, height + 2 * r, width + 2 * r), dtype=dtype)
        for dy in range(p):
            for dx in range(p):
                canvas[:, :, dy : dy + height, dx : dx + width] += g6[..., dy, dx]
        return canvas[:, :, r : r + height, r : r + width]

    ones = np.ones((1, channels, height, width, p, p), dtype=np.float64)
    count = scatter(ones, np.float64).astype(patches.dtype)
    p6 = patches.value.reshape(bsz, height, width, channels, p, p).transpose(0, 3, 1, 2, 4, 5)
    out = scatter(p6, patches.dtype) / count

    def bw(g):
        gc = g / count
        gp = np.zeros((bsz, channels, height + 2 * r, width + 2 * r), dtype=g.dtype)
        gp[:, :, r : r + height, r : r + width] = gc
        win = sliding_window_view(gp, (p, p), axis=(2, 3))  # [B, C, H, W, p, p]
        return (np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz, n, d),)

    return Node(out, (patches,), bw)


def normalize_rows(x, eps: float = NORM_EPS) -> Node:
    """Scale each last-axis vector to unit length; vectors with norm < eps map to 0."""
    x = _node(x)
    norm = np.sqrt(np.sum(x.value.astype(np.float64) ** 2, axis=-1, keepdims=True))
    ok = norm >= eps
    inv = np.where(ok, 1.0 / np.where(ok, norm, 1.0), 0.0).astype(x.dtype)
    y = x.value * inv

    def bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - y * dot) * inv,)

    return Node(y, (x,), bw)


def matmul_nt(a, b) -> Node:
    """``a @ b.T`` over the last two axes.

    ``a`` is ``[..., N, D]``; ``b`` is either ``[M, D]`` (shared across the
    batch) or has the same leading axes as ``a``.
    """
    a, b = _node(a), _node(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"matmul_nt: last axes differ, {a.shape} vs {b.shape}")
    shared = b.value.ndim == 2 and a.value.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul_nt: batch axes differ, {a.shape} vs {b.shape}")
    bt = np.swapaxes(b.value, -1, -2)
    out = a.value @ bt

    def bw(g):
        ga = g @ b.value
        gbt = np.swapaxes(g, -1, -2) @ a.value
        if shared:
            gbt = gbt.reshape(-1, *b.shape).sum(axis=0)
        return ga, gbt

    return Node(out, (a, b), bw)


def max_last(x) -> tuple[Node, np.ndarray]:
    """Maximum over the last axis and the index of its first occurrence.

    The gradient is routed to that first maximal entry only.
    """
    x = _node(x)
    idx = np.argmax(x.value, axis=-1)
    vals = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        if "max_last" in _FAULTS:
            gx = gx * 1.5
        return (gx,)

    return Node(vals, (x,), bw), idx


def rowmax_nt(a, b) -> tuple[Node, np.ndarray, np.ndarray]:
    """Fused ``max_last(matmul_nt(a, b))``.

    Returns the row maxima (differentiable), their first-occurrence indices
    and the full product matrix. The values are read from that matrix, so
    they equal ``product[..., i, idx[i]]`` bit for bit. The backward pass
    only touches the selected pairs instead of the dense product.
    """
    a, b = _node(a), _node(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"rowmax_nt: last axes differ, {a.shape} vs {b.shape}")
    shared = b.value.ndim == 2 and a.value.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"rowmax_nt: batch axes differ, {a.shape} vs {b.shape}")
    prod = a.value @ np.swapaxes(b.value, -1, -2)
    idx = np.argmax(prod, axis=-1)
    vals = np.take_along_axis(prod, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if shared:
            picked = b.value[idx]
        else:
            picked = np.take_along_axis(b.value, idx[..., None], axis=-2)
        ga = g[..., None] * picked
        if "max_last" in _FAULTS:
            ga = ga * 1.5
        gb = np.zeros(b.shape, dtype=b.dtype)
        contrib = g[..., None] * a.value
        if shared:
            np.add.at(gb, idx.reshape(-1), contrib.reshape(-1, b.shape[-1]))
        else:
            flat = idx.reshape(-1, idx.shape[-1])
            cflat = contrib.reshape(-1, *contrib.shape[-2:])
            gflat = gb.reshape(-1, *b.shape[-2:])
            for k in range(flat.shape[0]):
                np.add.at(gflat[k], flat[k], cflat[k])
        return ga, gb

    return Node(vals, (a, b), bw), idx, prod


def gather_rows(x, idx: np.ndarray) -> Node:
    """Select rows: ``out[..., i, :] = x[..., idx[..., i], :]``.

    ``x`` is ``[M, D]`` (shared) or ``[B, M, D]``; ``idx`` is ``[N]`` or
    ``[B, N]``. The backward pass scatter-adds into the selected rows.
    """
    x = _node(x)
    idx = np.asarray(idx)
    m = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"gather_rows: index out of range [0, {m})")
    if x.value.ndim == 2:
        out = x.value[idx]
    else:
        if x.shape[0] != idx.shape[0]:
            raise ShapeError(f"gather_rows: batch {x.shape[0]} vs index batch {idx.shape[0]}")
        out = np.take_along_axis(x.value, idx[..., None], axis=-2)

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        if x.value.ndim == 2:
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.shape[-1]))
        else:
            for k in range(x.shape[0]):
                np.add.at(gx[k], idx[k], g[k])
        return (gx,)

    return Node(out, (x,), bw)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Mutates ``state``; returns new arrays."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam: state shape mismatch for {name!r}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = (p - step).astype(p.dtype)
    return out


class Adam:
    """Adam over a dict of parameter nodes, consuming their ``.grad``."""

    def __init__(self, params: dict[str, Node], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        values = {k: p.value for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new = adam_step(values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for k, p in self.params.items():
            p.value = new[k]


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    grad_scale: dict[str, float] = field(default_factory=dict)
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def silent(self) -> list[str]:
        """Blocks whose analytic gradient is identically zero (the check says nothing about them)."""
        return [k for k, v in self.grad_scale.items() if v == 0.0]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> tuple[str, float]:
        return max(self.max_rel_error.items(), key=lambda kv: kv[1])

    def lines(self) -> list[str]:
        return [
            f"{name}: max_rel_error={err:.3e} kinks={self.kinks.get(name, 0)} "
            f"{'ok' if err <= self.tolerance else 'FAIL'}"
            for name, err in self.max_rel_error.items()
        ]


def _has_kink(f: Callable[[], float], flat: np.ndarray, i: int, step: float, points: int = 8) -> bool:
    """True if the loss slope jumps somewhere in ``[x - step, x + step]``.

    ReLU, L1 and argmax make the loss piecewise smooth; a central difference
    straddling a breakpoint measures neither one-sided derivative.
    """
    orig = flat[i]
    xs = orig + np.linspace(-step, step, points + 1)
    vals = []
    for x in xs:
        flat[i] = x
        vals.append(f())
    flat[i] = orig
    slopes = np.diff(vals) / np.diff(xs)
    jumps = np.abs(np.diff(slopes))
    typical = np.median(jumps)
    return bool(jumps.max() > 10.0 * typical + 1e-9 * max(np.abs(slopes).max(), 1.0))


def grad_check(
    loss_fn: Callable[[], Node],
    params: dict[str, Node],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Every parameter must be float64. The per-element relative error is
    ``|a - n| / max(|a|, |n|, floor)``; the report keeps the maximum per
    parameter block. An element that misses the tolerance is rescanned on a
    finer grid inside ``+-step``; if the loss has a slope break there the
    element is counted under ``kinks`` instead of scored.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters; {name!r} is {p.dtype}")
    for p in params.values():
        p.value = np.ascontiguousarray(p.value)
        p.zero_grad()
    backward(loss_fn())

    def f() -> float:
        return float(loss_fn().value)

    errors, scales, kinks = {}, {}, {}
    for name, p in params.items():
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        flat = p.value.reshape(-1)
        a_flat = analytic.reshape(-1)
        worst, n_kinks = 0.0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), floor)
            if err > tolerance and _has_kink(f, flat, i, step):
                n_kinks += 1
                continue
            worst = max(worst, err)
        errors[name] = worst
        scales[name] = float(np.max(np.abs(analytic)))
        kinks[name] = n_kinks
        p.zero_grad()
    return GradCheckReport(errors, tolerance, scales, kinks)
