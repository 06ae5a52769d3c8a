"""Minimal reverse-mode autodiff over dense float64 arrays.

Implements exactly the primitive set needed by the graph/attention encoders
and the training losses: matmul, elementwise arithmetic with per-row and
per-scalar broadcasting, sigmoid/SiLU/log, feature-wise normalization,
neighborhood pooling via segment ops, gather/scatter, concat, softmax and
row normalization, plus scalar reductions.

A `Tape` records primitive applications; `backward` walks it in reverse and
accumulates gradients into `ParamStore` leaf buffers.  Everything is float64:
finite-difference acceptance at 1e-4 relative error is not reliable in
float32.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

EPS_NORM = 1e-8


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive op."""


class GradientError(RuntimeError):
    """Non-finite value produced during forward or backward."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint container."""


def _as_f64(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    `tape` / `node` are None for constants; tracked tensors were produced by
    a primitive (or registered as parameter leaves) and participate in
    backward.
    """

    __slots__ = ("values", "tape", "node")

    def __init__(self, values, tape=None, node=None):
        self.values = _as_f64(values)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.values.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple            # node ids (or None for constants), order matches op
    ctx: dict                # saved arrays/metadata for backward
    param: str | None = None  # leaf nodes only


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._params: "ParamStore | None" = None

    def _record(self, op, input_nodes, ctx, param=None) -> int:
        self.nodes.append(_Node(op, tuple(input_nodes), ctx, param))
        return len(self.nodes) - 1


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ShapeError("operands recorded on different tapes")
    return tape


def _check_finite(op: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise GradientError(f"non-finite values in forward op '{op}'")


def _apply(op, out_values, in_tensors, ctx):
    """Record op on the inputs' tape (if any) and wrap the result."""
    _check_finite(op, out_values)
    tape = _tape_of(*in_tensors)
    if tape is None:
        return Tensor(out_values)
    node = tape._record(op, [t.node for t in in_tensors], ctx)
    return Tensor(out_values, tape, node)


# ---------------------------------------------------------------------------
# broadcasting helpers: same shape, per-row vector over a matrix, or scalar
# ---------------------------------------------------------------------------

def _bcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[1]:
        return "row"
    if b.size == 1:
        return "scalar"
    raise ShapeError(f"{op}: cannot broadcast {b.shape} onto {a.shape}")


def _reduce_like(grad: np.ndarray, kind: str, b_shape) -> np.ndarray:
    if kind == "same":
        return grad
    if kind == "row":
        return grad.sum(axis=0)
    return np.asarray(grad.sum()).reshape(b_shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _bcast_kind(a.values, b.values, "add")
    out = a.values + b.values
    return _apply("add", out, (a, b), {"kind": kind, "b_shape": b.values.shape})


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _bcast_kind(a.values, b.values, "sub")
    out = a.values - b.values
    return _apply("sub", out, (a, b), {"kind": kind, "b_shape": b.values.shape})


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _bcast_kind(a.values, b.values, "mul")
    out = a.values * b.values
    return _apply("mul", out, (a, b),
                  {"kind": kind, "a": a.values, "b": b.values,
                   "b_shape": b.values.shape})


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise ShapeError(f"div: shapes {a.values.shape} vs {b.values.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.values / b.values
    return _apply("div", out, (a, b), {"a": a.values, "b": b.values})


def add_const(a: Tensor, c: float) -> Tensor:
    return _apply("add_const", a.values + c, (a,), {})


def mul_const(a: Tensor, c: float) -> Tensor:
    return _apply("mul_const", a.values * c, (a,), {"c": c})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul: operands must be 2-d")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(
            f"matmul: inner dims {a.values.shape} @ {b.values.shape}")
    out = a.values @ b.values
    return _apply("matmul", out, (a, b), {"a": a.values, "b": b.values})


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError("transpose: input must be 2-d")
    return _apply("transpose", a.values.T.copy(), (a,), {})


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.values)
    return _apply("sigmoid", out, (a,), {"y": out})


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.values)
    out = a.values * s
    return _apply("silu", out, (a,), {"x": a.values, "s": s})


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise GradientError("log: non-positive input")
    out = np.log(a.values)
    return _apply("log", out, (a,), {"x": a.values})


def clip_min(a: Tensor, floor: float) -> Tensor:
    out = np.maximum(a.values, floor)
    return _apply("clip_min", out, (a,), {"pass": a.values > floor})


def feature_norm(a: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Standardize each row to zero mean / unit variance (no batch stats)."""
    if a.values.ndim != 2:
        raise ShapeError("feature_norm: input must be 2-d")
    mean = a.values.mean(axis=1, keepdims=True)
    var = a.values.var(axis=1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (a.values - mean) / std
    return _apply("feature_norm", xhat, (a,), {"xhat": xhat, "std": std})


def softmax_rows(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError("softmax_rows: input must be 2-d")
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _apply("softmax_rows", out, (a,), {"y": out})


def row_normalize(a: Tensor) -> Tensor:
    """Divide each row by its sum (measures assumed positive)."""
    if a.values.ndim != 2:
        raise ShapeError("row_normalize: input must be 2-d")
    s = a.values.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise GradientError("row_normalize: non-positive row sum")
    out = a.values / s
    return _apply("row_normalize", out, (a,), {"y": out, "s": s})


def total_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum())
    return _apply("sum", out, (a,), {"shape": a.values.shape})


def mean(a: Tensor) -> Tensor:
    out = np.asarray(a.values.mean())
    return _apply("mean", out, (a,), {"shape": a.values.shape,
                                      "n": a.values.size})


def reshape(a: Tensor, shape) -> Tensor:
    out = a.values.reshape(shape).copy()
    return _apply("reshape", out, (a,), {"shape": a.values.shape})


def concat(tensors, axis: int = 0) -> Tensor:
    arrays = [t.values for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    widths = [arr.shape[axis] for arr in arrays]
    node_ids = [t.node for t in tensors]
    _check_finite("concat", out)
    tape = _tape_of(*tensors)
    if tape is None:
        return Tensor(out)
    node = tape._record("concat", node_ids, {"axis": axis, "widths": widths})
    return Tensor(out, tape, node)


def take(a: Tensor, flat_idx) -> Tensor:
    """Gather entries of the flattened tensor at `flat_idx` (1-d output)."""
    idx = np.asarray(flat_idx, dtype=np.int64)
    out = a.values.reshape(-1)[idx]
    return _apply("take", out, (a,), {"idx": idx, "shape": a.values.shape})


def gather_rows(a: Tensor, row_idx) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError("gather_rows: input must be 2-d")
    idx = np.asarray(row_idx, dtype=np.int64)
    out = a.values[idx]
    return _apply("gather_rows", out, (a,), {"idx": idx, "shape": a.values.shape})


def scatter(values: Tensor, flat_idx, shape, fill: float = 0.0) -> Tensor:
    """Place a 1-d tensor at flat indices of a new array filled with `fill`.

    The fill is a constant: no gradient flows to it.
    """
    idx = np.asarray(flat_idx, dtype=np.int64)
    if values.values.ndim != 1 or idx.shape != values.values.shape:
        raise ShapeError("scatter: values and flat_idx must be matching 1-d")
    out = np.full(shape, fill, dtype=np.float64)
    out.reshape(-1)[idx] = values.values
    return _apply("scatter", out, (values,), {"idx": idx})


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows (or scalars, for 1-d input) into `num_segments` groups."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.values.shape[0]:
        raise ShapeError("segment_sum: segment_ids length mismatch")
    out_shape = (num_segments,) + a.values.shape[1:]
    out = np.zeros(out_shape, dtype=np.float64)
    np.add.at(out, seg, a.values)
    return _apply("segment_sum", out, (a,), {"seg": seg})


def segment_mean(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Mean-pool rows by segment; empty segments yield zero rows."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.values.shape[0]:
        raise ShapeError("segment_mean: segment_ids length mismatch")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    out_shape = (num_segments,) + a.values.shape[1:]
    out = np.zeros(out_shape, dtype=np.float64)
    np.add.at(out, seg, a.values)
    safe = np.maximum(counts, 1.0)
    out = out / (safe[:, None] if a.values.ndim == 2 else safe)
    return _apply("segment_mean", out, (a,), {"seg": seg, "counts": safe})


# ---------------------------------------------------------------------------
# backward rules
# ---------------------------------------------------------------------------

def _backward_op(node: _Node, g: np.ndarray):
    op, ctx = node.op, node.ctx
    if op == "add":
        return (g, _reduce_like(g, ctx["kind"], ctx["b_shape"]))
    if op == "sub":
        return (g, -_reduce_like(g, ctx["kind"], ctx["b_shape"]))
    if op == "mul":
        ga = g * ctx["b"]
        gb = _reduce_like(g * ctx["a"], ctx["kind"], ctx["b_shape"])
        return (ga, gb)
    if op == "div":
        a, b = ctx["a"], ctx["b"]
        return (g / b, -g * a / (b * b))
    if op == "add_const":
        return (g,)
    if op == "mul_const":
        return (g * ctx["c"],)
    if op == "matmul":
        return (g @ ctx["b"].T, ctx["a"].T @ g)
    if op == "transpose":
        return (g.T.copy(),)
    if op == "sigmoid":
        y = ctx["y"]
        return (g * y * (1.0 - y),)
    if op == "silu":
        s = ctx["s"]
        return (g * s * (1.0 + ctx["x"] * (1.0 - s)),)
    if op == "log":
        return (g / ctx["x"],)
    if op == "clip_min":
        return (g * ctx["pass"],)
    if op == "feature_norm":
        xhat, std = ctx["xhat"], ctx["std"]
        gm = g.mean(axis=1, keepdims=True)
        gx = (g - gm - xhat * (g * xhat).mean(axis=1, keepdims=True)) / std
        return (gx,)
    if op == "softmax_rows":
        y = ctx["y"]
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)
    if op == "row_normalize":
        y, s = ctx["y"], ctx["s"]
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) / s,)
    if op == "sum":
        return (np.full(ctx["shape"], float(g)),)
    if op == "mean":
        return (np.full(ctx["shape"], float(g) / ctx["n"]),)
    if op == "reshape":
        return (g.reshape(ctx["shape"]),)
    if op == "concat":
        out, start = [], 0
        axis = ctx["axis"]
        for w in ctx["widths"]:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + w)
            out.append(g[tuple(sl)].copy())
            start += w
        return tuple(out)
    if op == "take":
        ga = np.zeros(ctx["shape"], dtype=np.float64).reshape(-1)
        np.add.at(ga, ctx["idx"], g)
        return (ga.reshape(ctx["shape"]),)
    if op == "gather_rows":
        ga = np.zeros(ctx["shape"], dtype=np.float64)
        np.add.at(ga, ctx["idx"], g)
        return (ga,)
    if op == "scatter":
        return (g.reshape(-1)[ctx["idx"]].copy(),)
    if op == "segment_sum":
        return (g[ctx["seg"]].copy(),)
    if op == "segment_mean":
        scaled = g / (ctx["counts"][:, None] if g.ndim == 2 else ctx["counts"])
        return (scaled[ctx["seg"]].copy(),)
    if op == "param":
        return ()
    raise GradientError(f"no backward rule for op '{op}'")


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(param) into the tape's ParamStore gradients."""
    if loss.tape is not tape or loss.node is None:
        raise GradientError("loss was not produced on this tape")
    if loss.values.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.values.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.values)}
    store = tape._params
    for nid in range(len(tape.nodes) - 1, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.param is not None:
            if store is None:
                raise GradientError("tape has parameter leaves but no store")
            store.accumulate(node.param, g)
            continue
        in_grads = _backward_op(node, g)
        for iid, ig in zip(node.inputs, in_grads):
            if iid is None or ig is None:
                continue
            if not np.all(np.isfinite(ig)):
                raise GradientError(
                    f"non-finite gradient from op '{node.op}' (node {nid})")
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameters with gradient buffers and Adam moments."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def create(self, name: str, values) -> np.ndarray:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already exists")
        arr = _as_f64(values).copy()
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def names(self):
        return list(self._params)

    def get(self, name: str) -> np.ndarray:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, g: np.ndarray):
        self._grads[name] += g.reshape(self._grads[name].shape)

    def zero_grad(self):
        for g in self._grads.values():
            g[...] = 0.0

    def use(self, name: str, tape: Tape) -> Tensor:
        """Register a parameter as a leaf node on `tape`."""
        if tape._params is None:
            tape._params = self
        elif tape._params is not self:
            raise ValueError("tape already bound to a different ParamStore")
        node = tape._record("param", (), {}, param=name)
        return Tensor(self._params[name], tape, node)

    def adam_step(self, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8):
        """One Adam update over all parameters; zeroes gradients after."""
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for name, p in self._params.items():
            g = self._grads[name]
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        self.zero_grad()

    def moments(self, name: str):
        return self._m[name].copy(), self._v[name].copy()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for name, arr in values.items():
            if name not in self._params:
                raise CheckpointError(f"unknown parameter '{name}'")
            if self._params[name].shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for '{name}': "
                    f"store {self._params[name].shape} vs file {arr.shape}")
            self._params[name][...] = arr


# ---------------------------------------------------------------------------
# checkpoint container: JSON with base64-encoded little-endian float64 data
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore, metadata: dict):
    payload = {
        "format": "antopt-checkpoint",
        "version": CHECKPOINT_VERSION,
        "metadata": metadata,
        "params": {
            name: {
                "shape": list(arr.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode(),
            }
            for name, arr in store.state_dict().items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "antopt-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    params = {}
    for name, entry in payload["params"].items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        params[name] = arr.reshape(entry["shape"])
    return params, payload["metadata"]
