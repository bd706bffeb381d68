"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 for high-precision
gradient verification). Every differentiable operation records its parents
and a backward closure on the output tensor, so the computation graph is
the implicit DAG of parent links, built eagerly during the forward pass and
discarded by `backward`. Tensors are immutable after construction except
for gradient accumulation.

Ops only broadcast along leading batch axes (numpy alignment rules); there
is no implicit type promotion -- mixing float32 and float64 operands is an
error.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericalError, ShapeError, UsageError

_DTYPES = (np.float32, np.float64)

# When enabled, every op output is checked for NaN/Inf. Off by default for
# speed; the training loop checks the loss explicitly either way.
_finite_checks = False


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


class Tensor:
    """N-dimensional array with an optional accumulated gradient.

    `data` is a read-only numpy array; `grad` (same shape, same dtype) is
    populated by `backward` for tensors created with `requires_grad=True`
    and for intermediates on a path to one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if not (isinstance(data, np.ndarray) and arr.dtype in _DTYPES):
                arr = arr.astype(np.float32)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        if _finite_checks and not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite values produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` over the recorded graph.

        Only valid on scalar (single-element) roots. The graph is freed
        afterwards; leaf gradients persist and add up across calls until
        `zero_grad`.
        """
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._parents:
                node.grad = None  # keep gradients only on leaves
            node._parents = ()
            node._backward = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(*ts: Tensor) -> None:
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise UsageError(f"mixed dtypes {d} and {t.data.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(data, (a, b), backward, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = x.data.dtype.type(s)
    data = x.data * s

    def backward(g):
        x._accumulate(g * s)

    return Tensor._result(data, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(_relu_backward(g, x.data))

    return Tensor._result(data, (x,), backward, "relu")


def _relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    u = _GELU_A * (x.data + _GELU_B * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        x._accumulate(_gelu_backward(g, x.data, t))

    return Tensor._result(data.astype(x.data.dtype, copy=False), (x,), backward, "gelu")


def _gelu_backward(g: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    du = _GELU_A * (1.0 + 3.0 * _GELU_B * x**2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du).astype(x.dtype, copy=False)


# -- reductions ---------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(())

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False))

    return Tensor._result(data, (x,), backward, "sum")


def mean_over(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    data = x.data.mean(axis=axes)
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        ge = np.expand_dims(g, axes)
        x._accumulate((np.broadcast_to(ge, x.shape) / count).astype(x.data.dtype, copy=False))

    return Tensor._result(data, (x,), backward, "mean")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product contracting the last axis of `a` with the
    second-to-last of `b`; leading axes broadcast."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: batch extents incompatible, {a.shape} x {b.shape}") from e

    def backward(g):
        ga, gb = _matmul_backward(g, a.data, b.data)
        if a.requires_grad:
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._result(data, (a, b), backward, "matmul")


def _matmul_backward(g, a, b):
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax_last: empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate(data * (g - dot))

    return Tensor._result(data.astype(x.data.dtype, copy=False), (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then
    apply the learned per-channel affine."""
    _check_same_dtype(x, gain, bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} do not match C={c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((inv * (dxhat - m1 - xhat * m2)).astype(x.data.dtype, copy=False))

    return Tensor._result(data.astype(x.data.dtype, copy=False), (x, gain, bias), backward, "layer_norm")


# -- shape manipulation --------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape {x.shape} -> {shape}") from e

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return Tensor._result(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return Tensor._result(data, (x,), backward, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ref_rest = ref[:axis] + ref[axis + 1 :] if t.ndim == len(ref) else None
        if ref_rest is None or other[:axis] + other[axis + 1 :] != ref_rest:
            raise ShapeError(f"concat: extents differ off axis {axis}: {ref} vs {other}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + size)
                t._accumulate(g[tuple(idx)])
            start += size

    return Tensor._result(data, tuple(tensors), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice `[start, start+length)` along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) outside extent {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x._accumulate(full)

    return Tensor._result(data, (x,), backward, "narrow")


def tile0(x: Tensor, reps: int) -> Tensor:
    """Repeat the whole tensor `reps` times along a new leading dimension,
    then merge it into the first axis."""
    data = np.tile(x.data, (reps,) + (1,) * (x.ndim - 1))

    def backward(g):
        x._accumulate(g.reshape((reps,) + x.shape).sum(axis=0))

    return Tensor._result(data, (x,), backward, "tile0")


def grid_subsample(x: Tensor, stride: int) -> Tensor:
    """Strided spatial subsampling of a [C, H, W] map: keeps every
    `stride`-th row/column starting at the origin (the center-tap reading of
    a 3x3/pad-1 pooling window)."""
    if x.ndim != 3:
        raise ShapeError(f"grid_subsample expects [C, H, W], got {x.shape}")
    if stride == 1:
        return x
    data = x.data[:, ::stride, ::stride].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, ::stride, ::stride] = g
        x._accumulate(full)

    return Tensor._result(data, (x,), backward, "grid_subsample")


# -- convolution ----------------------------------------------------------------


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def strided_conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    bias: Tensor | None = None,
) -> Tensor:
    """2-D cross-correlation of a [C_in, H, W] map with a
    [C_out, C_in/groups, k, k] kernel."""
    _check_same_dtype(x, kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects x[C,H,W], kernel[O,I,k,k]; got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    c_out, c_k, kh, kw = kernel.shape
    if c_in % groups or c_out % groups or c_k != c_in // groups:
        raise ShapeError(
            f"conv2d: kernel {kernel.shape} incompatible with input {x.shape} and groups={groups}"
        )
    hp = conv_output_extent(h, kh, stride, padding)
    wp = conv_output_extent(w, kw, stride, padding)
    if hp < 1 or wp < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad={padding})")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    # cols[c, ky, kx, i, j] = padded[c, ky + stride*i, kx + stride*j]
    cols = np.empty((c_in, kh, kw, hp, wp), dtype=x.data.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = xp[:, ky : ky + stride * hp : stride, kx : kx + stride * wp : stride]

    cg = c_in // groups
    og = c_out // groups
    cols_g = cols.reshape(groups, cg * kh * kw, hp * wp)
    w_g = kernel.data.reshape(groups, og, cg * kh * kw)
    out = np.matmul(w_g, cols_g).reshape(c_out, hp, wp)
    if bias is not None:
        _check_same_dtype(x, bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[:, None, None]

    def backward(g):
        gg = g.reshape(groups, og, hp * wp)
        if kernel.requires_grad:
            gk = np.matmul(gg, cols_g.transpose(0, 2, 1))
            kernel._accumulate(gk.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcols = np.matmul(w_g.transpose(0, 2, 1), gg).reshape(c_in, kh, kw, hp, wp)
            dxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, ky : ky + stride * hp : stride, kx : kx + stride * wp : stride] += dcols[
                        :, ky, kx
                    ]
            x._accumulate(dxp[:, padding : padding + h, padding : padding + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._result(out.astype(x.data.dtype, copy=False), parents, backward, "conv2d")


# -- resampling / normalization ------------------------------------------------


def _bilinear_weights(n_out: int, n_in: int):
    """Corner-aligned source indices and blend weights for one axis."""
    if n_in == 1 or n_out == 1:
        lo = np.zeros(n_out, dtype=np.int64)
        return lo, lo.copy(), np.zeros(n_out)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, n_in - 2)
    return lo, lo + 1, src - lo


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resampling of the trailing two axes."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"upsample_bilinear expects [H,W] or [C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    y0, y1, wy = _bilinear_weights(out_h, h)
    x0, x1, wx = _bilinear_weights(out_w, w)
    wy = wy[:, None]
    wx = wx[None, :]
    c00 = (1 - wy) * (1 - wx)
    c01 = (1 - wy) * wx
    c10 = wy * (1 - wx)
    c11 = wy * wx
    iy0, iy1 = y0[:, None], y1[:, None]
    ix0, ix1 = x0[None, :], x1[None, :]
    d = x.data
    data = (
        c00 * d[..., iy0, ix0]
        + c01 * d[..., iy0, ix1]
        + c10 * d[..., iy1, ix0]
        + c11 * d[..., iy1, ix1]
    )

    def backward(g):
        dx = np.zeros_like(x.data)
        flat_dx = dx.reshape(-1, h, w)
        flat_g = g.reshape(-1, out_h, out_w)
        for ch in range(flat_dx.shape[0]):
            gc = flat_g[ch]
            np.add.at(flat_dx[ch], (iy0, ix0), c00 * gc)
            np.add.at(flat_dx[ch], (iy0, ix1), c01 * gc)
            np.add.at(flat_dx[ch], (iy1, ix0), c10 * gc)
            np.add.at(flat_dx[ch], (iy1, ix1), c11 * gc)
        x._accumulate(dx)

    return Tensor._result(data.astype(x.data.dtype, copy=False), (x,), backward, "upsample")


def minmax_normalize(x: Tensor) -> Tensor:
    """Affinely map the tensor onto [0, 1]; a constant tensor maps to all
    zeros (degenerate-range convention)."""
    lo = x.data.min()
    hi = x.data.max()
    if hi <= lo:
        data = np.zeros_like(x.data)

        def backward_const(g):
            x._accumulate(np.zeros_like(x.data))

        return Tensor._result(data, (x,), backward_const, "minmax")

    span = hi - lo
    data = (x.data - lo) / span
    jmin = np.unravel_index(int(x.data.argmin()), x.shape)
    jmax = np.unravel_index(int(x.data.argmax()), x.shape)

    def backward(g):
        dx = g / span
        total = g.sum()
        weighted = (g * data).sum()
        dx[jmin] -= total / span
        dx[jmin] += weighted / span
        dx[jmax] -= weighted / span
        x._accumulate(dx.astype(x.data.dtype, copy=False))

    return Tensor._result(data.astype(x.data.dtype, copy=False), (x,), backward, "minmax")


# -- losses ----------------------------------------------------------------------


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """Softmax cross-entropy of a 1-D logit vector against a class index."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy_logits expects a 1-D logit vector, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise UsageError(f"target {target} outside [0, {logits.shape[0]})")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    data = np.asarray(lse - z[target], dtype=logits.data.dtype).reshape(())
    probs = np.exp(z - lse)

    def backward(g):
        grad = probs.copy()
        grad[target] -= 1.0
        logits._accumulate((g * grad).astype(logits.data.dtype, copy=False))

    return Tensor._result(data, (logits,), backward, "cross_entropy")


# -- initialization -----------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal samples with |x| > 2*std redrawn (two-sigma truncation)."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


# -- verification helpers ---------------------------------------------------------


def finite_difference(f, x: np.ndarray, index, h: float) -> float:
    """Central finite-difference estimate of d f / d x[index]."""
    xp = x.copy()
    xp[index] += h
    xm = x.copy()
    xm[index] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def gradcheck_coordinates(build_loss, arrays: dict[str, np.ndarray], coords, h_scale: float):
    """Compare analytic and finite-difference gradients at chosen coordinates.

    `build_loss` maps a dict of numpy arrays to a scalar-loss Tensor whose
    graph hangs off freshly created parameter tensors; it must return
    `(loss, params)` with `params` the name->Tensor mapping. `coords` is an
    iterable of `(name, flat_index)` pairs. Returns the list of relative
    errors `|analytic - numeric| / max(1, |numeric|)`.
    """
    loss, params = build_loss(arrays)
    loss.backward()
    grads = {k: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}

    errors = []
    for name, flat in coords:
        base = arrays[name]
        idx = np.unravel_index(flat, base.shape)
        h = h_scale * max(1.0, abs(float(base[idx])))

        def f(perturbed, _name=name, _arrays=arrays):
            trial = dict(_arrays)
            trial[_name] = perturbed
            out, _ = build_loss(trial)
            return out.item()

        numeric = finite_difference(f, base, idx, h)
        analytic = float(grads[name][idx])
        errors.append(abs(analytic - numeric) / max(1.0, abs(numeric)))
    return errors
