"""Minimal reverse-mode differentiable numerics on dense float64 arrays.

Everything the models need is covered by a small fixed set of primitives
(matrix/vector products, elementwise nonlinearities, softmax family,
concatenation, gathers) recorded on an explicit tape.  The tape is replayed
in reverse by :func:`backward`, accumulating gradients into leaf tensors.

All storage is dense float64: the point of this package is verification at
desk scale, and gradient checking needs the precision headroom.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "reflm-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """A primitive was applied to tensors whose shapes do not conform."""


def _fail_shape(primitive: str, *shapes) -> None:
    rendered = " x ".join(str(list(s)) for s in shapes)
    raise ShapeError(f"{primitive}: incompatible shapes {rendered}")


class Tensor:
    """Dense float64 array participating in the computation record.

    ``grad`` is populated by :func:`backward` for leaf tensors (tensors that
    are not the output of any recorded primitive) with ``requires_grad`` set.
    Gradients accumulate additively across backward calls until reset with
    :func:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {list(self.shape)} is not scalar")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """Copy with no gradient tracking; safe to mutate independently."""
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{tag})"


def scalar(value: float) -> Tensor:
    """Constant 0-d tensor."""
    return Tensor(np.float64(value))


class _RowUpdates:
    """Sparse gradient contribution: add ``values[k]`` to row ``rows[k]``.

    Used by embedding lookups so a backward pass allocates one dense
    gradient per table, not one per lookup.
    """

    __slots__ = ("rows", "values")

    def __init__(self, rows, values):
        self.rows = rows
        self.values = values


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: object  # callable(out_adjoint) -> tuple of per-input contributions


@dataclass
class Tape:
    """Ordered record of applied primitives, replayable in reverse.

    A tape and the tensors recorded on it belong to a single logical thread
    during forward/backward.  Clearing the tape drops all node references so
    non-parameter intermediates can be freed.
    """

    nodes: list[_Node] = field(default_factory=list)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPE: Tape | None = None


@contextmanager
def record():
    """Activate a fresh tape for the duration of the block.

    Primitives applied while no tape is active (or whose inputs all have
    ``requires_grad=False``) compute values only, which makes frozen
    parameter snapshots safe to evaluate concurrently.
    """
    global _ACTIVE_TAPE
    tape = Tape()
    previous = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = previous


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _emit(primitive: str, out_data, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE.nodes.append(_Node(out, inputs, vjp))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _fail_shape("add", a.shape, b.shape)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        _fail_shape("sub", a.shape, b.shape)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    if a.shape != b.shape:
        _fail_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        _fail_shape("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def matvec(a: Tensor, x: Tensor) -> Tensor:
    if a.data.ndim != 2 or x.data.ndim != 1 or a.shape[1] != x.shape[0]:
        _fail_shape("matvec", a.shape, x.shape)
    ad, xd = a.data, x.data
    return _emit("matvec", ad @ xd, (a, x), lambda g: (np.outer(g, xd), ad.T @ g))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        _fail_shape("dot", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("dot", np.float64(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def outer(a: Tensor, b: Tensor) -> Tensor:
    """Outer product of two vectors: out[i, j] = a[i] * b[j]."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        _fail_shape("outer", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("outer", np.outer(ad, bd), (a, b), lambda g: (g @ bd, g.T @ ad))


def weighted_sum(weights: Tensor, vectors: Tensor) -> Tensor:
    """Combine the rows of ``vectors`` [k, d] with ``weights`` [k]."""
    if weights.data.ndim != 1 or vectors.data.ndim != 2 \
            or weights.shape[0] != vectors.shape[0]:
        _fail_shape("weighted_sum", weights.shape, vectors.shape)
    wd, vd = weights.data, vectors.data
    return _emit("weighted_sum", wd @ vd, (weights, vectors),
                 lambda g: (vd @ g, np.outer(wd, g)))


def concat(*parts: Tensor) -> Tensor:
    if not parts:
        raise ShapeError("concat: needs at least one input")
    for p in parts:
        if p.data.ndim != 1:
            _fail_shape("concat", *(q.shape for q in parts))
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit("concat", np.concatenate([p.data for p in parts]), tuple(parts), vjp)


def stack(*parts: Tensor) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    if not parts:
        raise ShapeError("stack: needs at least one input")
    shape0 = parts[0].shape
    for p in parts:
        if p.shape != shape0:
            _fail_shape("stack", *(q.shape for q in parts))

    def vjp(g):
        return tuple(g[i] for i in range(len(parts)))

    return _emit("stack", np.stack([p.data for p in parts]), tuple(parts), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        _fail_shape("reshape", a.shape, shape)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # saturating-safe: never exponentiates a positive argument
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), computed as -softplus(-x); exact for large |x|."""
    x = a.data
    out = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                   x - np.log1p(np.exp(-np.abs(x))))
    # d/dx log sigmoid(x) = 1 - sigmoid(x) = 1 - exp(out)
    return _emit("log_sigmoid", out, (a,), lambda g: (g * (1.0 - np.exp(out)),))


def softmax(v: Tensor) -> Tensor:
    if v.data.ndim != 1 or v.shape[0] == 0:
        _fail_shape("softmax", v.shape)
    shifted = v.data - np.max(v.data)
    e = np.exp(shifted)
    out = e / e.sum()

    def vjp(g):
        return (out * (g - g @ out),)

    return _emit("softmax", out, (v,), vjp)


def log_softmax(v: Tensor) -> Tensor:
    if v.data.ndim != 1 or v.shape[0] == 0:
        _fail_shape("log_softmax", v.shape)
    shifted = v.data - np.max(v.data)
    out = shifted - np.log(np.exp(shifted).sum())

    def vjp(g):
        return (g - np.exp(out) * g.sum(),)

    return _emit("log_softmax", out, (v,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: argument must be strictly positive "
                         "(clamp_min before taking logs of probabilities)")
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    ad = a.data
    mask = ad > floor
    return _emit("clamp_min", np.maximum(ad, floor), (a,), lambda g: (g * mask,))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = a.shape
    return _emit("sum", np.float64(a.data.sum()), (a,),
                 lambda g: (np.full(shape, float(g)),))


def index(v: Tensor, i: int) -> Tensor:
    if v.data.ndim != 1:
        _fail_shape("index", v.shape)
    i = int(i)
    if not 0 <= i < v.shape[0]:
        raise IndexError(f"index: position {i} outside vector of length {v.shape[0]}")
    n = v.shape[0]

    def vjp(g):
        contribution = np.zeros(n)
        contribution[i] = float(g)
        return (contribution,)

    return _emit("index", np.float64(v.data[i]), (v,), vjp)


def take_sum(v: Tensor, positions) -> Tensor:
    """Sum of selected components of a vector (duplicates allowed)."""
    if v.data.ndim != 1:
        _fail_shape("take_sum", v.shape)
    idx = np.asarray(list(positions), dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("take_sum: empty position list")
    if np.any(idx < 0) or np.any(idx >= v.shape[0]):
        raise IndexError(f"take_sum: positions outside vector of length {v.shape[0]}")
    n = v.shape[0]

    def vjp(g):
        contribution = np.zeros(n)
        np.add.at(contribution, idx, float(g))
        return (contribution,)

    return _emit("take_sum", np.float64(v.data[idx].sum()), (v,), vjp)


def embedding(table: Tensor, token_id: int) -> Tensor:
    """Row lookup into an embedding matrix [vocab, dim]."""
    if table.data.ndim != 2:
        _fail_shape("embedding", table.shape)
    token_id = int(token_id)
    if not 0 <= token_id < table.shape[0]:
        raise IndexError(
            f"embedding: token id {token_id} outside table of {table.shape[0]} rows")

    def vjp(g):
        return (_RowUpdates(np.array([token_id]), g[None, :]),)

    return _emit("embedding", table.data[token_id].copy(), (table,), vjp)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Stable log(exp(a) + exp(b)) for 0-d tensors."""
    if a.size != 1 or b.size != 1:
        _fail_shape("logaddexp", a.shape, b.shape)
    av, bv = float(a.data.reshape(())), float(b.data.reshape(()))
    out = np.logaddexp(av, bv)

    def vjp(g):
        g = float(g)
        wa = math.exp(av - out) if out != -math.inf else 0.5
        return (np.float64(g * wa), np.float64(g * (1.0 - wa)))

    return _emit("logaddexp", np.float64(out), (a, b), vjp)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scale": scale,
    "matmul": matmul, "matvec": matvec, "dot": dot, "outer": outer,
    "weighted_sum": weighted_sum, "concat": concat, "stack": stack,
    "reshape": reshape, "tanh": tanh, "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid, "softmax": softmax, "log_softmax": log_softmax,
    "log": log, "clamp_min": clamp_min, "sum": tsum, "index": index,
    "take_sum": take_sum, "embedding": embedding, "logaddexp": logaddexp,
}


def apply_primitive(kind: str, *args):
    """Dispatch a primitive by name; non-tensor arguments pass through."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        known = ", ".join(sorted(PRIMITIVES))
        raise KeyError(f"unknown primitive {kind!r}; known: {known}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _accumulate(store: dict, key: int, contribution) -> None:
    if isinstance(contribution, _RowUpdates):
        raise TypeError("row updates must target leaf parameters")
    if key in store:
        store[key] = store[key] + contribution
    else:
        store[key] = np.array(contribution, dtype=np.float64, copy=True)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every leaf tensor the scalar loss depends on.

    Gradients add into any existing ``grad`` arrays, so repeated calls
    accumulate; reset with :func:`zero_grad`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss has shape {list(loss.shape)}, expected scalar")
    tape = tape if tape is not None else _ACTIVE_TAPE
    if tape is None:
        raise RuntimeError("backward: no computation record is active")

    produced = {id(node.out) for node in tape.nodes}
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # leaf gradients may be sparse row updates; buffer them densely per leaf
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}

    def push_leaf(tensor: Tensor, contribution) -> None:
        key = id(tensor)
        leaves[key] = tensor
        if key not in leaf_grads:
            leaf_grads[key] = np.zeros_like(tensor.data)
        if isinstance(contribution, _RowUpdates):
            np.add.at(leaf_grads[key], contribution.rows, contribution.values)
        else:
            leaf_grads[key] += contribution

    for node in reversed(tape.nodes):
        g = adjoint.get(id(node.out))
        if g is None:
            continue
        contributions = node.vjp(g)
        for source, contribution in zip(node.inputs, contributions):
            if contribution is None or not source.requires_grad:
                continue
            if id(source) in produced:
                _accumulate(adjoint, id(source), contribution)
            else:
                push_leaf(source, contribution)

    if id(loss) not in produced and loss.requires_grad:
        push_leaf(loss, np.ones_like(loss.data))

    for key, tensor in leaves.items():
        if tensor.grad is None:
            tensor.grad = leaf_grads[key]
        else:
            tensor.grad = tensor.grad + leaf_grads[key]


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    param_index: int
    coord: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: GradCheckEntry | None
    failures: list[str]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = ""
        if self.worst is not None:
            worst = (f" worst: param {self.worst.param_index} coord {self.worst.coord}"
                     f" analytic={self.worst.analytic:.6g} numeric={self.worst.numeric:.6g}")
        return f"grad_check {status} max_rel_error={self.max_rel_error:.3g}{worst}"


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare backward gradients of ``f()`` against central differences.

    ``f`` must be a deterministic scalar function of the given parameter
    tensors (closed over them); it is re-evaluated with each coordinate
    perturbed by +/- h.  Passes iff the max relative error is below ``tol``.
    """
    params = list(params)
    saved = [p.grad for p in params]
    zero_grad(params)
    with record() as tape:
        loss = f()
        backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    failures: list[str] = []
    worst: GradCheckEntry | None = None
    max_rel = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        ana = analytic[pi].reshape(-1)
        for ci in range(flat.size):
            original = flat[ci]
            flat[ci] = original + h
            up = float(f().data.reshape(()))
            flat[ci] = original - h
            down = float(f().data.reshape(()))
            flat[ci] = original
            if math.isnan(up) or math.isnan(down):
                failures.append(f"param {pi} coord {ci}: f evaluated to NaN")
                continue
            numeric = (up - down) / (2.0 * h)
            rel = _rel_error(float(ana[ci]), numeric)
            if rel >= max_rel:
                max_rel = rel
                worst = GradCheckEntry(pi, ci, float(ana[ci]), numeric, rel)
    passed = not failures and max_rel < tol
    return GradCheckReport(passed, max_rel, worst, failures)


def global_norm(tensors) -> float:
    """L2 norm over all gradients of the given tensors (missing grads are 0)."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], metadata: dict | None = None) -> None:
    """Write named parameters as a versioned JSON map.

    Parameter names are dot-delimited paths; values are stored as shape plus
    row-major float64 data.  Output is byte-deterministic for identical
    inputs (keys sorted, floats via repr).
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for name, t in sorted(params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    params = {}
    for name, entry in payload["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return params, payload.get("metadata", {})


def assign_parameters(params: dict[str, Tensor], values: dict[str, np.ndarray],
                      strict: bool = True) -> list[str]:
    """Copy loaded arrays into parameter tensors by name; returns missing names.

    With ``strict=False`` parameters absent from ``values`` keep their current
    (freshly initialized) data, which is how a model is warm-started from a
    checkpoint of a smaller model.
    """
    missing = []
    for name, tensor in params.items():
        if name in values:
            arr = values[name]
            if arr.shape != tensor.data.shape:
                raise ShapeError(
                    f"assign_parameters: {name} has shape {list(tensor.data.shape)}, "
                    f"checkpoint has {list(arr.shape)}")
            tensor.data = arr.copy()
        else:
            missing.append(name)
    if strict and missing:
        raise KeyError(f"checkpoint missing parameters: {', '.join(sorted(missing))}")
    return missing
