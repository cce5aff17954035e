"""Minimal dense-tensor core with reverse-mode gradients.

Static graphs built from a small set of primitives (affine, 3x3 same-pad
convolution, ReLU, average pooling, nearest upsampling, channel concat,
softmax cross-entropy and a few scalar reductions). Evaluation is pure:
``forward`` returns a tape, ``backward`` consumes it, and the graph object
itself is never mutated, so disjoint evaluations may run concurrently.

Model/attack arithmetic runs in float32 by default; callers that need
high-precision checks (finite differences) evaluate the same graph in
float64 via the ``dtype`` argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# One unit in the last place of float32 at magnitude 1.0; the slack allowed
# by budget assertions on float32 image arithmetic.
ULP32 = float(np.spacing(np.float32(1.0)))


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


# ---------------------------------------------------------------------------
# array kernels (shared with the transforms module)
# ---------------------------------------------------------------------------

def avgpool2d(x: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping k x k average pooling over the trailing two axes."""
    if k < 1:
        raise ValueError(f"avgpool2d: window {k} must be >= 1")
    h, w = x.shape[-2], x.shape[-1]
    if h % k or w % k:
        raise ValueError(f"avgpool2d: window {k} does not divide spatial dims {h}x{w}")
    shape = x.shape[:-2] + (h // k, k, w // k, k)
    return x.reshape(shape).mean(axis=(-3, -1))


def upsample_nearest(x: np.ndarray, k: int) -> np.ndarray:
    """Nearest-neighbour upsampling by an integer factor on the trailing two axes."""
    if k < 1:
        raise ValueError(f"upsample_nearest: factor {k} must be >= 1")
    return np.repeat(np.repeat(x, k, axis=-2), k, axis=-1)


def shift2d(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer pixel shift with zero fill; dx moves columns, dy moves rows."""
    out = np.zeros_like(x)
    h, w = x.shape[-2], x.shape[-1]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_r, dst_c] = x[..., src_r, src_c]
    return out


# ---------------------------------------------------------------------------
# graph primitives
# ---------------------------------------------------------------------------

class _Ctx:
    """Per-evaluation state: dtype-cast parameters, labels, parameter grads."""

    def __init__(self, params, labels, dtype):
        self.dtype = dtype
        self.params = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}
        self.labels = labels
        self.param_grads: dict[str, np.ndarray] = {}

    def add_param_grad(self, name, g):
        if name in self.param_grads:
            self.param_grads[name] += g
        else:
            self.param_grads[name] = g


class Op:
    name = "op"

    def forward(self, xs, ctx):
        raise NotImplementedError

    def backward(self, xs, y, gy, ctx):
        """Return one gradient (or None) per input of the node."""
        raise NotImplementedError

    def _fail(self, msg):
        raise ValueError(f"{self.name}: {msg}")


class InputOp(Op):
    name = "input"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, xs, ctx):
        (x,) = xs
        if x.shape[1:] != self.shape:
            self._fail(f"expected input of shape (N, {', '.join(map(str, self.shape))}), got {x.shape}")
        return x

    def backward(self, xs, y, gy, ctx):
        return (gy,)


class Affine(Op):
    """y = x @ W.T + b with W of shape (out, in)."""

    name = "affine"

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias

    def forward(self, xs, ctx):
        (x,) = xs
        w = ctx.params[self.weight]
        b = ctx.params[self.bias]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            self._fail(f"input {x.shape} incompatible with weight {w.shape} ({self.weight})")
        return x @ w.T + b

    def backward(self, xs, y, gy, ctx):
        (x,) = xs
        w = ctx.params[self.weight]
        ctx.add_param_grad(self.weight, gy.T @ x)
        ctx.add_param_grad(self.bias, gy.sum(axis=0))
        return (gy @ w,)


class Conv3x3(Op):
    """3x3 convolution, stride 1, zero-padded 'same'; weight (Cout, Cin, 3, 3)."""

    name = "conv3x3"

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias

    def _cols(self, x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * 9)

    def forward(self, xs, ctx):
        (x,) = xs
        w = ctx.params[self.weight]
        b = ctx.params[self.bias]
        if x.ndim != 4:
            self._fail(f"expected N,C,H,W input, got shape {x.shape}")
        if x.shape[1] != w.shape[1]:
            self._fail(f"input channels {x.shape[1]} != weight channels {w.shape[1]} ({self.weight})")
        n, _, h, wd = x.shape
        cout = w.shape[0]
        cols = self._cols(x)
        out = cols @ w.reshape(cout, -1).T + b
        return out.transpose(0, 2, 1).reshape(n, cout, h, wd)

    def backward(self, xs, y, gy, ctx):
        (x,) = xs
        w = ctx.params[self.weight]
        n, cin, h, wd = x.shape
        cout = w.shape[0]
        g2 = gy.reshape(n, cout, h * wd).transpose(0, 2, 1)  # N,HW,Cout
        cols = self._cols(x)
        gw = np.einsum("npo,npk->ok", g2, cols).reshape(w.shape)
        ctx.add_param_grad(self.weight, gw)
        ctx.add_param_grad(self.bias, gy.sum(axis=(0, 2, 3)))
        gcols = g2 @ w.reshape(cout, -1)  # N,HW,Cin*9
        g6 = gcols.reshape(n, h, wd, cin, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, cin, h + 2, wd + 2), dtype=gy.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + h, dj:dj + wd] += g6[:, :, :, :, di, dj]
        return (gxp[:, :, 1:h + 1, 1:wd + 1],)


class ReLU(Op):
    name = "relu"

    def forward(self, xs, ctx):
        return np.maximum(xs[0], 0)

    def backward(self, xs, y, gy, ctx):
        # subgradient at 0 is 0
        return (gy * (xs[0] > 0),)


class AvgPool(Op):
    name = "avgpool"

    def __init__(self, k):
        self.k = k

    def forward(self, xs, ctx):
        return avgpool2d(xs[0], self.k)

    def backward(self, xs, y, gy, ctx):
        k = self.k
        g = np.repeat(np.repeat(gy, k, axis=-2), k, axis=-1)
        return (g / (k * k),)


class Upsample(Op):
    name = "upsample"

    def __init__(self, k):
        self.k = k

    def forward(self, xs, ctx):
        return upsample_nearest(xs[0], self.k)

    def backward(self, xs, y, gy, ctx):
        k = self.k
        n, c, h, w = gy.shape
        return (gy.reshape(n, c, h // k, k, w // k, k).sum(axis=(3, 5)),)


class ConcatChannels(Op):
    name = "concat"

    def forward(self, xs, ctx):
        base = xs[0].shape
        for x in xs[1:]:
            if x.shape[0] != base[0] or x.shape[2:] != base[2:]:
                self._fail(f"incompatible shapes {[x.shape for x in xs]}")
        return np.concatenate(xs, axis=1)

    def backward(self, xs, y, gy, ctx):
        splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(gy, splits, axis=1))


class MeanHW(Op):
    """Global average over the spatial axes: (N,C,H,W) -> (N,C)."""

    name = "mean_hw"

    def forward(self, xs, ctx):
        if xs[0].ndim != 4:
            self._fail(f"expected 4-d input, got shape {xs[0].shape}")
        return xs[0].mean(axis=(2, 3))

    def backward(self, xs, y, gy, ctx):
        n, c, h, w = xs[0].shape
        g = np.broadcast_to(gy[:, :, None, None], (n, c, h, w)) / (h * w)
        return (g.astype(gy.dtype),)


class Flatten(Op):
    name = "flatten"

    def forward(self, xs, ctx):
        return xs[0].reshape(xs[0].shape[0], -1)

    def backward(self, xs, y, gy, ctx):
        return (gy.reshape(xs[0].shape),)


class Aggregate(Op):
    """Elementwise mean or median across same-shaped inputs (ensemble heads)."""

    name = "aggregate"

    def __init__(self, rule):
        if rule not in ("mean", "median"):
            raise ValueError(f"aggregate: unknown rule {rule!r}")
        self.rule = rule

    def forward(self, xs, ctx):
        s = np.stack(xs, axis=0)
        if self.rule == "mean":
            return s.mean(axis=0)
        return np.median(s, axis=0)

    def backward(self, xs, y, gy, ctx):
        h = len(xs)
        if self.rule == "mean":
            g = gy / h
            return tuple(g.copy() for _ in xs)
        s = np.stack(xs, axis=0)
        order = np.argsort(s, axis=0, kind="stable")
        grads = [np.zeros_like(gy) for _ in xs]
        if h % 2 == 1:
            mid = order[h // 2]
            for i in range(h):
                grads[i] = gy * (mid == i)
        else:
            for m in (order[h // 2 - 1], order[h // 2]):
                for i in range(h):
                    grads[i] = grads[i] + 0.5 * gy * (m == i)
        return tuple(grads)


class SoftmaxCE(Op):
    """Per-sample cross-entropy against ctx.labels: (N,C) logits -> (N,) losses."""

    name = "softmax_ce"

    def forward(self, xs, ctx):
        (z,) = xs
        if z.ndim != 2:
            self._fail(f"expected (N, C) logits, got shape {z.shape}")
        y = ctx.labels
        if y is None:
            self._fail("labels required for cross-entropy")
        if y.shape != (z.shape[0],):
            self._fail(f"labels shape {y.shape} != batch ({z.shape[0]},)")
        if np.any(y < 0) or np.any(y >= z.shape[1]):
            self._fail(f"label out of range [0, {z.shape[1]})")
        zs = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1))
        return lse - zs[np.arange(z.shape[0]), y]

    def backward(self, xs, y, gy, ctx):
        (z,) = xs
        lab = ctx.labels
        zs = z - z.max(axis=1, keepdims=True)
        e = np.exp(zs)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), lab] -= 1
        return (p * gy[:, None],)


class Sum(Op):
    name = "sum"

    def forward(self, xs, ctx):
        return np.asarray(xs[0].sum(), dtype=ctx.dtype)

    def backward(self, xs, y, gy, ctx):
        return (np.full_like(xs[0], gy),)


class Mean(Op):
    name = "mean"

    def forward(self, xs, ctx):
        return np.asarray(xs[0].mean(), dtype=ctx.dtype)

    def backward(self, xs, y, gy, ctx):
        return (np.full_like(xs[0], gy / xs[0].size),)


class SumSquares(Op):
    name = "sum_squares"

    def forward(self, xs, ctx):
        return np.asarray((xs[0] * xs[0]).sum(), dtype=ctx.dtype)

    def backward(self, xs, y, gy, ctx):
        return (2.0 * xs[0] * gy,)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    op: Op
    inputs: tuple[int, ...]


@dataclass
class Tape:
    """Forward-pass record; owned by the caller, never by the graph.

    ``values[i]`` is None for nodes that the forward pass skipped because no
    requested output depends on them.
    """

    values: list
    ctx: _Ctx


class Graph:
    """Static computation graph. Nodes are appended in topological order
    (inputs of a node always precede it), which forward/backward rely on.
    """

    def __init__(self, input_shape):
        self.nodes: list[_Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.outputs: dict[str, int] = {}
        self.input_shape = tuple(input_shape)
        self._add(InputOp(self.input_shape))

    # -- construction ------------------------------------------------------

    def _add(self, op: Op, *inputs: int) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op.name}: input node {i} not defined yet")
        self.nodes.append(_Node(op, tuple(inputs)))
        return len(self.nodes) - 1

    def add_param(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        self.params[name] = np.ascontiguousarray(value, dtype=np.float32)
        return name

    def mark_output(self, name: str, node: int):
        self.outputs[name] = node

    @property
    def input_id(self) -> int:
        return 0

    def affine(self, x, weight, bias):
        return self._add(Affine(weight, bias), x)

    def conv3x3(self, x, weight, bias):
        return self._add(Conv3x3(weight, bias), x)

    def relu(self, x):
        return self._add(ReLU(), x)

    def avgpool(self, x, k):
        return self._add(AvgPool(k), x)

    def upsample(self, x, k):
        return self._add(Upsample(k), x)

    def concat_channels(self, *xs):
        return self._add(ConcatChannels(), *xs)

    def mean_hw(self, x):
        return self._add(MeanHW(), x)

    def flatten(self, x):
        return self._add(Flatten(), x)

    def aggregate(self, xs, rule):
        return self._add(Aggregate(rule), *xs)

    def softmax_ce(self, x):
        return self._add(SoftmaxCE(), x)

    def sum(self, x):
        return self._add(Sum(), x)

    def mean(self, x):
        return self._add(Mean(), x)

    def sum_squares(self, x):
        return self._add(SumSquares(), x)

    # -- evaluation ---------------------------------------------------------

    def _ancestors(self, roots) -> set:
        need = set()
        stack = list(roots)
        while stack:
            i = stack.pop()
            if i not in need:
                need.add(i)
                stack.extend(self.nodes[i].inputs)
        return need

    def forward(self, x: np.ndarray, labels=None, dtype=np.float32, outputs=None) -> Tape:
        """Evaluate the graph; with ``outputs`` given, only the nodes those
        named outputs depend on are computed."""
        x = np.ascontiguousarray(x, dtype=dtype)
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
        ctx = _Ctx(self.params, labels, dtype)
        if outputs is None:
            need = range(len(self.nodes))
        else:
            unknown = [o for o in outputs if o not in self.outputs]
            if unknown:
                raise KeyError(f"graph has no output named {unknown[0]!r}; have {sorted(self.outputs)}")
            need = sorted(self._ancestors(self.outputs[o] for o in outputs))
        values: list = [None] * len(self.nodes)
        with np.errstate(all="ignore"):  # require_finite turns overflow into hard errors
            for idx in need:
                node = self.nodes[idx]
                if idx == 0:
                    val = node.op.forward((x,), ctx)
                else:
                    val = node.op.forward(tuple(values[i] for i in node.inputs), ctx)
                require_finite(val, f"output of {node.op.name}#{idx}")
                values[idx] = val
        return Tape(values, ctx)

    def output(self, tape: Tape, name: str) -> np.ndarray:
        if name not in self.outputs:
            raise KeyError(f"graph has no output named {name!r}; have {sorted(self.outputs)}")
        val = tape.values[self.outputs[name]]
        if val is None:
            raise ValueError(f"output {name!r} was not evaluated on this tape")
        return val

    def backward(self, tape: Tape, output: str):
        """Gradient of the named scalar output w.r.t. the graph input.

        Returns (input_grad, param_grads). Parameter gradients use the same
        dtype as the tape's evaluation.
        """
        root = self.outputs.get(output)
        if root is None:
            raise KeyError(f"graph has no output named {output!r}; have {sorted(self.outputs)}")
        out_val = tape.values[root]
        if out_val is None:
            raise ValueError(f"output {output!r} was not evaluated on this tape")
        if out_val.size != 1:
            raise ValueError(f"gradient requested for non-scalar output {output!r} of shape {out_val.shape}")
        ctx = tape.ctx
        ctx.param_grads = {}
        grads: list = [None] * len(self.nodes)
        grads[root] = np.ones_like(out_val)
        with np.errstate(all="ignore"):
            for idx in range(root, -1, -1):
                gy = grads[idx]
                if gy is None:
                    continue
                node = self.nodes[idx]
                xs = (tape.values[idx],) if idx == 0 else tuple(tape.values[i] for i in node.inputs)
                gin = node.op.backward(xs, tape.values[idx], gy, ctx)
                if idx == 0:
                    continue
                for src, g in zip(node.inputs, gin):
                    if g is None:
                        continue
                    if grads[src] is None:
                        grads[src] = g
                    else:
                        grads[src] = grads[src] + g
        gx = grads[0]
        if gx is None:
            gx = np.zeros_like(tape.values[0])
        require_finite(gx, "input gradient")
        return gx, ctx.param_grads


def forward_backward(graph: Graph, x, labels, output, dtype=np.float32):
    """Convenience wrapper: one forward pass plus input/param gradients."""
    tape = graph.forward(x, labels=labels, dtype=dtype)
    gx, gp = graph.backward(tape, output)
    return tape, gx, gp


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckResult:
    max_rel_error: float
    worst_index: tuple
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradient_check(graph: Graph, x, labels=None, output="loss", h=1e-4,
                   tolerance=1e-3) -> GradientCheckResult:
    """Compare the analytic input gradient against central finite differences.

    Both sides are evaluated in float64. Reports the max relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over coordinates;
    it does not raise on large errors.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    tape = graph.forward(x, labels=labels, dtype=np.float64)
    analytic, _ = graph.backward(tape, output)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(graph.output(graph.forward(x, labels=labels, dtype=np.float64), output))
        flat[i] = orig - h
        f_minus = float(graph.output(graph.forward(x, labels=labels, dtype=np.float64), output))
        flat[i] = orig
        numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradientCheckResult(float(rel.max()), worst, float(tolerance))


# ---------------------------------------------------------------------------
# named-tensor checkpoint container
# ---------------------------------------------------------------------------
#
# Binary layout (little-endian, version 1):
#   magic   4 bytes  b"NTCK"
#   version u16
#   count   u32
#   then per tensor, sorted by name:
#     name_len u16, name utf-8 bytes
#     dtype    u8   (0 = float32, 1 = float64, 2 = int64)
#     ndim     u8, shape u32 * ndim
#     data     raw C-order values
#
# Sorting plus fixed integer widths make the file a pure function of its
# contents, so identical tensors always produce identical bytes.

_MAGIC = b"NTCK"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def save_tensors(path, tensors: dict[str, np.ndarray]):
    chunks = [_MAGIC,
              int(_VERSION).to_bytes(2, "little"),
              len(tensors).to_bytes(4, "little")]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODE_FOR:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        enc = name.encode("utf-8")
        chunks.append(len(enc).to_bytes(2, "little"))
        chunks.append(enc)
        chunks.append(bytes([_CODE_FOR[arr.dtype], arr.ndim]))
        for d in arr.shape:
            chunks.append(int(d).to_bytes(4, "little"))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint (bad magic {blob[:4]!r})")
    version = int.from_bytes(blob[4:6], "little")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    count = int.from_bytes(blob[6:10], "little")
    pos = 10
    out: dict[str, np.ndarray] = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint while reading {what} at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        name_len = int.from_bytes(take(2, "name length"), "little")
        name = take(name_len, "name").decode("utf-8")
        code, ndim = take(2, "dtype/ndim")
        if code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        shape = tuple(int.from_bytes(take(4, "shape"), "little") for _ in range(ndim))
        dt = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(take(nbytes, f"data of {name!r}"), dtype=dt).reshape(shape)
        out[name] = data.astype(dt.newbyteorder("="))
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after tensor data")
    return out
