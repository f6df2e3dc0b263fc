"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy array wrapped in a :class:`Tensor`. Operations on
tensors record a backward closure when any input requires gradients, forming
an implicit tape (parent references in topological order). ``backward`` on a
scalar walks that tape once, in reverse, accumulating gradients into every
reachable tensor with ``requires_grad``.

Design constraints honored here:
  * float64 everywhere; any op producing a non-finite value raises
    NumericError instead of propagating NaN/inf silently.
  * tensors are treated as immutable after creation (gradcheck is the one
    sanctioned exception, for finite-difference probing in tests);
  * a graph is backward-once: a second ``backward`` on the same root raises.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {opname}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._done = False

    # ---- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- backward ------------------------------------------------------
    def backward(self) -> dict["Tensor", np.ndarray]:
        """Reverse sweep from a scalar root.

        Returns a map {leaf tensor -> gradient array} for every leaf
        (no-parent tensor with requires_grad) reached by the sweep.
        Gradients accumulate into ``.grad`` as well.
        """
        if self.size != 1:
            raise DimensionError(f"backward root must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a detached root: nothing on the tape")
        if self._done:
            raise ValueError("backward called twice on the same tape")
        self._done = True

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent.grad is None:
                        parent.grad = pg.astype(np.float64, copy=True)
                    else:
                        parent.grad = parent.grad + pg
            elif not node._parents:
                leaves[node] = node.grad
        # release interior closures so the graph can be collected
        for node in topo:
            if node is not self and node._parents:
                node._vjp = None
                node._parents = ()
                node.grad = None
        return leaves

    # ---- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def powc(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def tsin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def tcos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth, so finite-difference checks behave."""
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out_data, (a,), vjp, "gelu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select by a constant boolean mask; differentiable in a and b only."""
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)), "where")


# ---- reductions -----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp, "mean")


# ---- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    # materialize the result: downstream reductions must not depend on the
    # memory layout (numpy's pairwise summation order follows the strides,
    # which would make bitwise determinism depend on how a value was built)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, vjp, "stack")


# ---- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.shape[-1] < 1:
        raise DimensionError("softmax needs a nonempty last dimension")
    _check_finite(a.data, "softmax input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (a,), vjp, "softmax")


# ---- structured kernels ----------------------------------------------------

def conv2d(x: Tensor, k: Tensor, stride=1, padding=(0, 0)) -> Tensor:
    """Cross-correlation of a C_in x H x W map with a C_out x C_in x kh x kw kernel."""
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError(f"conv2d expects CHW input and OIHW kernel, got {x.shape}, {k.shape}")
    if x.shape[0] != k.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = padding
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    _, ho, wo, _, _ = win.shape
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)
    kmat = k.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ kmat.T).T.reshape(cout, ho, wo)

    def vjp(g):
        gmat = g.reshape(cout, ho * wo).T
        gk = (gmat.T @ cols).reshape(k.shape)
        gcols = (gmat @ kmat).reshape(ho, wo, cin, kh, kw).transpose(2, 0, 1, 3, 4)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho * sh:sh, j:j + wo * sw:sw] += gcols[:, :, :, i, j]
        if ph or pw:
            return gxp[:, ph:ph + h, pw:pw + w], gk
        return gxp, gk

    return _make(out_data, (x, k), vjp, "conv2d")


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bin i covers input rows [floor(i*H/out_h), ceil((i+1)*H/out_h))."""
    if x.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool expects CHW input, got {x.shape}")
    c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"pool output extents must be positive, got {out_h}x{out_w}")
    if out_h > h or out_w > w:
        raise DimensionError(f"pool output {out_h}x{out_w} exceeds input {h}x{w}")

    hb = [(int(np.floor(i * h / out_h)), int(np.ceil((i + 1) * h / out_h))) for i in range(out_h)]
    wb = [(int(np.floor(j * w / out_w)), int(np.ceil((j + 1) * w / out_w))) for j in range(out_w)]
    out_data = np.empty((c, out_h, out_w))
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out_data[:, i, j] = x.data[:, h0:h1, w0:w1].mean(axis=(1, 2))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                gx[:, h0:h1, w0:w1] += g[:, i:i + 1, j:j + 1] / ((h1 - h0) * (w1 - w0))
        return (gx,)

    return _make(out_data, (x,), vjp, "adaptive_avg_pool")


def bilinear_sample(x: Tensor, points: Tensor) -> Tensor:
    """Sample a C x H x W map at P continuous (y, x) coords -> C x P.

    Pixel centers sit at integer coordinates; out-of-range coordinates are
    clamped to the border (constant maps stay constant under any sampling).
    Differentiable w.r.t. the map and the coordinates (zero slope where a
    coordinate is clamped).
    """
    if x.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"bilinear_sample expects CHW map and Px2 points, "
                             f"got {x.shape}, {points.shape}")
    _check_finite(points.data, "bilinear_sample coords")
    c, h, w = x.shape
    yc = np.clip(points.data[:, 0], 0.0, h - 1.0)
    xc = np.clip(points.data[:, 1], 0.0, w - 1.0)
    in_y = (points.data[:, 0] > 0.0) & (points.data[:, 0] < h - 1.0)
    in_x = (points.data[:, 1] > 0.0) & (points.data[:, 1] < w - 1.0)

    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yc - y0
    wx = xc - x0

    v00 = x.data[:, y0, x0]
    v01 = x.data[:, y0, x1]
    v10 = x.data[:, y1, x0]
    v11 = x.data[:, y1, x1]
    out_data = ((1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01
                + wy * (1 - wx) * v10 + wy * wx * v11)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), y0, x0), g * ((1 - wy) * (1 - wx)))
        np.add.at(gx, (slice(None), y0, x1), g * ((1 - wy) * wx))
        np.add.at(gx, (slice(None), y1, x0), g * (wy * (1 - wx)))
        np.add.at(gx, (slice(None), y1, x1), g * (wy * wx))
        dy = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
        dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
        gp = np.stack([(g * dy).sum(axis=0) * in_y, (g * dx).sum(axis=0) * in_x], axis=1)
        return gx, gp

    return _make(out_data, (x, points), vjp, "bilinear_sample")


def fk_compose(locals_: Tensor, parents: Sequence[int]) -> Tensor:
    """Chain J local 4x4 transforms along a kinematic tree.

    ``parents[j]`` precedes j (root has parent -1 and must come first).
    Returns the J x 4 x 4 global transforms.
    """
    if locals_.ndim != 3 or locals_.shape[1:] != (4, 4):
        raise DimensionError(f"fk_compose expects Jx4x4 transforms, got {locals_.shape}")
    parents = list(parents)
    j_count = locals_.shape[0]
    loc = locals_.data
    glob = np.empty_like(loc)
    for j in range(j_count):
        p = parents[j]
        glob[j] = loc[j] if p < 0 else glob[p] @ loc[j]

    def vjp(g):
        acc = g.copy()
        gl = np.empty_like(loc)
        for j in range(j_count - 1, -1, -1):
            p = parents[j]
            if p < 0:
                gl[j] = acc[j]
            else:
                gl[j] = glob[p].T @ acc[j]
                acc[p] += acc[j] @ loc[j].T
        return (gl,)

    return _make(glob, (locals_,), vjp, "fk_compose")


def blend_dirs(dirs: np.ndarray, coeffs: Tensor) -> Tensor:
    """Contract constant V x 3 x K blendshape directions with K coefficients."""
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.shape[-1] != coeffs.shape[0]:
        raise DimensionError(f"blend_dirs mismatch: dirs {dirs.shape} vs coeffs {coeffs.shape}")

    def vjp(g):
        return (np.tensordot(dirs, g, axes=([0, 1], [0, 1])),)

    return _make(np.tensordot(dirs, coeffs.data, axes=([2], [0])), (coeffs,), vjp, "blend_dirs")


# ---- gradient checking -----------------------------------------------------

def gradcheck(f, inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of the given tensors.
    Relative error per component is |a - n| / max(1e-8, |a| + |n|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    worst = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                rel = abs(aflat[i] - num) / max(1e-8, abs(aflat[i]) + abs(num))
                worst = max(worst, rel)
    return worst
