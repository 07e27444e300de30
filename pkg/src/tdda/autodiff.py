"""Define-then-run reverse-mode differentiation over dense float64 matrices.

A :class:`Tape` is built once by calling its primitive methods, which return
:class:`Node` handles.  ``forward`` evaluates every node for a set of input
bindings and ``backward`` pulls the gradient of a scalar node back onto the
parameter leaves.  Every value is a 2-D ``float64`` array with rows as the
batch axis; scalars are ``(1, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

PROB_FLOOR = 1e-7
LOG_FLOOR = float(np.log(PROB_FLOOR))
LOG_CEIL = float(np.log1p(-PROB_FLOOR))


class TapeError(ValueError):
    """Raised when a tape is used inconsistently."""


class ShapeError(TapeError):
    def __init__(self, node: str, expected, actual):
        self.node = node
        self.expected = expected
        self.actual = actual
        super().__init__(f"node {node!r}: expected shape {expected}, got {actual}")


class NonFiniteError(FloatingPointError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"node {node!r} produced a non-finite value")


@dataclass(frozen=True)
class Node:
    tape: "Tape" = field(repr=False, compare=False)
    id: int
    name: str

    def __add__(self, other: "Node") -> "Node":
        return self.tape.add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return self.tape.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return self.tape.scale(self, -1.0)


def _softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(a):
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _log_sigmoid(a):
    # log(1 / (1 + e^-a)) without overflow
    return -np.logaddexp(0.0, -a)


class Tape:
    """A topologically ordered list of primitive operations.

    Leaves are created with :meth:`input` (bound data), :meth:`param`
    (bound and differentiable) and :meth:`const`.
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._attrs: list[dict] = []
        self._names: list[str] = []
        self._leaves: dict[str, int] = {}
        self._params: dict[str, int] = {}
        self._values: list[np.ndarray] | None = None
        self._needs_cache: dict[frozenset, list[bool]] = {}
        self._sinks: list[int] | None = None

    # -- graph construction -------------------------------------------------

    def __len__(self) -> int:
        return len(self._ops)

    def _push(self, op: str, args: tuple[Node, ...], name: str | None = None, **attrs) -> Node:
        for a in args:
            if a.tape is not self:
                raise TapeError(f"{op}: argument {a.name!r} belongs to another tape")
        idx = len(self._ops)
        name = name or f"{op}_{idx}"
        self._ops.append(op)
        self._args.append(tuple(a.id for a in args))
        self._attrs.append(attrs)
        self._names.append(name)
        self._values = None
        self._sinks = None
        self._needs_cache.clear()
        return Node(self, idx, name)

    def input(self, name: str) -> Node:
        if name in self._leaves:
            return Node(self, self._leaves[name], name)
        node = self._push("input", (), name)
        self._leaves[name] = node.id
        return node

    def param(self, name: str) -> Node:
        node = self.input(name)
        self._params[name] = node.id
        return node

    def const(self, value, name: str | None = None) -> Node:
        return self._push("const", (), name, value=np.atleast_2d(np.asarray(value, dtype=np.float64)))

    def matmul(self, a: Node, b: Node, name=None) -> Node:
        return self._push("matmul", (a, b), name)

    def bias_add(self, a: Node, b: Node, name=None) -> Node:
        return self._push("bias_add", (a, b), name)

    def add(self, a: Node, b: Node, name=None) -> Node:
        return self._push("add", (a, b), name)

    def sub(self, a: Node, b: Node, name=None) -> Node:
        return self._push("sub", (a, b), name)

    def mul(self, a: Node, b: Node, name=None) -> Node:
        return self._push("mul", (a, b), name)

    def scale(self, a: Node, c: float, name=None) -> Node:
        return self._push("scale", (a,), name, c=float(c))

    def leaky_relu(self, a: Node, slope: float = 0.2, name=None) -> Node:
        return self._push("leaky_relu", (a,), name, slope=float(slope))

    def tanh(self, a: Node, name=None) -> Node:
        return self._push("tanh", (a,), name)

    def exp(self, a: Node, name=None) -> Node:
        return self._push("exp", (a,), name)

    def log(self, a: Node, name=None) -> Node:
        """Natural log with the argument clamped below at ``PROB_FLOOR``."""
        return self._push("log", (a,), name)

    def softmax(self, a: Node, name=None) -> Node:
        return self._push("softmax", (a,), name)

    def log_softmax(self, a: Node, name=None) -> Node:
        """Row-wise log-probabilities via log-sum-exp, floored at ``log(PROB_FLOOR)``."""
        return self._push("log_softmax", (a,), name)

    def sigmoid(self, a: Node, name=None) -> Node:
        """Logistic function clamped to ``[PROB_FLOOR, 1 - PROB_FLOOR]``."""
        return self._push("sigmoid", (a,), name)

    def log_sigmoid(self, a: Node, name=None) -> Node:
        """``log(sigmoid(a))`` with the probability clamped to ``[PROB_FLOOR, 1 - PROB_FLOOR]``."""
        return self._push("log_sigmoid", (a,), name)

    def clip(self, a: Node, lo: float, hi: float, name=None) -> Node:
        """Elementwise clamp to ``[lo, hi]``; zero gradient outside."""
        return self._push("clip", (a,), name, lo=float(lo), hi=float(hi))

    def slice_cols(self, a: Node, start: int, stop: int, name=None) -> Node:
        return self._push("slice_cols", (a,), name, start=int(start), stop=int(stop))

    def sum_rows(self, a: Node, name=None) -> Node:
        """Sum across columns: ``(n, c) -> (n, 1)``."""
        return self._push("sum_rows", (a,), name)

    def mean(self, a: Node, name=None) -> Node:
        """Mean across the batch: ``(n, c) -> (1, c)``."""
        return self._push("mean", (a,), name)

    def l1_diff(self, a: Node, b: Node, name=None) -> Node:
        """Row-wise L1 norm of ``a - b``: ``(n, c) -> (n, 1)``."""
        return self._push("l1_diff", (a, b), name)

    def stop_gradient(self, a: Node, name=None) -> Node:
        return self._push("stop_gradient", (a,), name)

    # -- evaluation ---------------------------------------------------------

    @property
    def inputs(self) -> list[str]:
        return list(self._leaves)

    @property
    def params(self) -> list[str]:
        return list(self._params)

    def forward(self, bindings: Mapping[str, np.ndarray],
                pinned: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Evaluate all nodes; the result is indexed by node id.

        ``pinned`` maps node ids to values used instead of computing them.
        Pinning the stop-gradient nodes gives the function whose derivative
        :meth:`backward` returns, which is what a finite-difference check needs.
        """
        missing = [k for k in self._leaves if k not in bindings]
        if missing:
            raise TapeError(f"unbound inputs: {missing}")
        values: list[np.ndarray] = []
        # overflow is reported through the finite check below, not as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            for i, op in enumerate(self._ops):
                args = [values[j] for j in self._args[i]]
                if pinned is not None and i in pinned:
                    v = pinned[i]
                elif op == "input":
                    v = np.asarray(bindings[self._names[i]], dtype=np.float64)
                    if v.ndim != 2:
                        raise ShapeError(self._names[i], "2-D matrix", v.shape)
                else:
                    _check_shapes(op, self._names[i], args, self._attrs[i])
                    v = _FORWARD[op](args, self._attrs[i])
                values.append(v)
        if self.check_finite:
            self._check_finite(values)
        self._values = values
        return values

    def _check_finite(self, values):
        # non-finite values propagate to the sinks unless a clamp absorbs them,
        # so watch the sinks plus exp nodes (the overflow source) and scan on failure
        if self._sinks is None:
            used = {j for a in self._args for j in a}
            self._sinks = [i for i, op in enumerate(self._ops) if i not in used or op == "exp"]
        if all(np.isfinite(values[i]).all() for i in self._sinks):
            return
        for i, v in enumerate(values):
            if not np.isfinite(v).all():
                raise NonFiniteError(self._names[i])

    def value_by_id(self, i: int) -> np.ndarray:
        if self._values is None:
            raise TapeError("forward has not been run")
        return self._values[i]

    def kink_distance(self) -> float:
        """Smallest distance, at the last forward values, from an argument of a
        piecewise op to one of its breakpoints (kinks and clamp edges).

        Finite differences are only meaningful when this exceeds the step size
        times the local input scale.
        """
        if self._values is None:
            raise TapeError("forward has not been run")
        vals = self._values
        best = np.inf
        for i, op in enumerate(self._ops):
            args = [vals[j] for j in self._args[i]]
            if op == "leaky_relu":
                d = np.abs(args[0])
            elif op == "l1_diff":
                d = np.abs(args[0] - args[1])
            elif op == "clip":
                at = self._attrs[i]
                d = np.minimum(np.abs(args[0] - at["lo"]), np.abs(args[0] - at["hi"]))
            elif op == "log":
                d = np.abs(args[0] - PROB_FLOOR)
            elif op == "log_softmax":
                d = np.abs(_log_softmax(args[0]) - LOG_FLOOR)
            elif op in ("sigmoid", "log_sigmoid"):
                ls = _log_sigmoid(args[0])
                d = np.minimum(np.abs(ls - LOG_FLOOR), np.abs(ls - LOG_CEIL))
            else:
                continue
            if d.size:
                best = min(best, float(d.min()))
        return best

    def stop_gradient_ids(self) -> list[int]:
        return [i for i, op in enumerate(self._ops) if op == "stop_gradient"]

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise TapeError("forward has not been run")
        return self._values[node.id]

    def _needs_grad(self, wrt: frozenset) -> list[bool]:
        cached = self._needs_cache.get(wrt)
        if cached is not None:
            return cached
        needs = []
        for i, op in enumerate(self._ops):
            if op == "input":
                needs.append(self._names[i] in wrt)
            elif op in ("const", "stop_gradient"):
                needs.append(False)
            else:
                needs.append(any(needs[j] for j in self._args[i]))
        self._needs_cache[wrt] = needs
        return needs

    def backward(self, loss: Node, wrt=None) -> dict[str, np.ndarray]:
        """Gradient of the scalar ``loss`` with respect to parameter leaves.

        ``wrt`` restricts the returned parameters (default: all of them);
        branches that cannot reach any of them are skipped.
        """
        if self._values is None:
            raise TapeError("forward has not been run")
        values = self._values
        if values[loss.id].shape != (1, 1):
            raise TapeError(f"loss {loss.name!r} is not scalar: shape {values[loss.id].shape}")
        names = list(self._params) if wrt is None else list(wrt)
        for n in names:
            if n not in self._params:
                raise TapeError(f"unknown parameter {n!r}")
        needs = self._needs_grad(frozenset(names))
        grads: list[np.ndarray | None] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones((1, 1))
        for i in range(loss.id, -1, -1):
            g = grads[i]
            if g is None or not needs[i]:
                continue
            op = self._ops[i]
            if op == "input":
                continue
            arg_ids = self._args[i]
            args = [values[j] for j in arg_ids]
            for j, gj in zip(arg_ids, _BACKWARD[op](g, args, values[i], self._attrs[i])):
                if gj is None or not needs[j]:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for n in names:
            pid = self._params[n]
            g = grads[pid] if pid < len(grads) else None
            out[n] = np.zeros_like(values[pid]) if g is None else g
        return out

    def node(self, name: str) -> Node:
        for i in range(len(self._names) - 1, -1, -1):
            if self._names[i] == name:
                return Node(self, i, name)
        raise KeyError(name)


def _check_shapes(op, name, args, attrs):
    if op == "matmul":
        a, b = args
        if a.shape[1] != b.shape[0]:
            raise ShapeError(name, f"({a.shape[1]}, *)", b.shape)
    elif op == "bias_add":
        a, b = args
        if b.shape != (1, a.shape[1]):
            raise ShapeError(name, (1, a.shape[1]), b.shape)
    elif op in ("add", "sub", "mul", "l1_diff"):
        a, b = args
        if a.shape != b.shape:
            raise ShapeError(name, a.shape, b.shape)
    elif op == "slice_cols":
        (a,) = args
        if not 0 <= attrs["start"] < attrs["stop"] <= a.shape[1]:
            raise ShapeError(name, f"at least {attrs['stop']} columns", a.shape)


def _fwd_slice(args, at):
    return args[0][:, at["start"]:at["stop"]]


_FORWARD: dict[str, Callable] = {
    "const": lambda args, at: at["value"],
    "matmul": lambda args, at: args[0] @ args[1],
    "bias_add": lambda args, at: args[0] + args[1],
    "add": lambda args, at: args[0] + args[1],
    "sub": lambda args, at: args[0] - args[1],
    "mul": lambda args, at: args[0] * args[1],
    "scale": lambda args, at: args[0] * at["c"],
    "leaky_relu": lambda args, at: (np.maximum(args[0], at["slope"] * args[0]) if at["slope"] <= 1.0
                                    else np.where(args[0] > 0, args[0], at["slope"] * args[0])),
    "tanh": lambda args, at: np.tanh(args[0]),
    "exp": lambda args, at: np.exp(args[0]),
    "log": lambda args, at: np.log(np.maximum(args[0], PROB_FLOOR)),
    "softmax": lambda args, at: _softmax(args[0]),
    "log_softmax": lambda args, at: np.maximum(_log_softmax(args[0]), LOG_FLOOR),
    "sigmoid": lambda args, at: np.clip(np.exp(_log_sigmoid(args[0])), PROB_FLOOR, 1.0 - PROB_FLOOR),
    "log_sigmoid": lambda args, at: np.clip(_log_sigmoid(args[0]), LOG_FLOOR, LOG_CEIL),
    "clip": lambda args, at: np.clip(args[0], at["lo"], at["hi"]),
    "slice_cols": _fwd_slice,
    "sum_rows": lambda args, at: args[0].sum(axis=1, keepdims=True),
    "mean": lambda args, at: args[0].mean(axis=0, keepdims=True),
    "l1_diff": lambda args, at: np.abs(args[0] - args[1]).sum(axis=1, keepdims=True),
    "stop_gradient": lambda args, at: args[0],
}


def _bwd_slice(g, args, out, at):
    full = np.zeros_like(args[0])
    full[:, at["start"]:at["stop"]] = g
    return (full,)


def _bwd_softmax(g, args, out, at):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _bwd_log_softmax(g, args, out, at):
    g = np.where(out > LOG_FLOOR, g, 0.0)
    p = _softmax(args[0])
    return (g - p * g.sum(axis=1, keepdims=True),)


def _bwd_sigmoid(g, args, out, at):
    inside = (out > PROB_FLOOR) & (out < 1.0 - PROB_FLOOR)
    return (np.where(inside, g * out * (1.0 - out), 0.0),)


def _bwd_log_sigmoid(g, args, out, at):
    # d/da log sigmoid(a) = sigmoid(-a)
    inside = (out > LOG_FLOOR) & (out < LOG_CEIL)
    return (np.where(inside, g * np.exp(_log_sigmoid(-args[0])), 0.0),)


def _bwd_l1(g, args, out, at):
    s = g * np.sign(args[0] - args[1])
    return (s, -s)


_BACKWARD: dict[str, Callable] = {
    "const": lambda g, args, out, at: (),
    "matmul": lambda g, args, out, at: (g @ args[1].T, args[0].T @ g),
    "bias_add": lambda g, args, out, at: (g, g.sum(axis=0, keepdims=True)),
    "add": lambda g, args, out, at: (g, g),
    "sub": lambda g, args, out, at: (g, -g),
    "mul": lambda g, args, out, at: (g * args[1], g * args[0]),
    "scale": lambda g, args, out, at: (g * at["c"],),
    "leaky_relu": lambda g, args, out, at: (np.where(args[0] > 0, g, at["slope"] * g),),
    "tanh": lambda g, args, out, at: (g * (1.0 - out * out),),
    "exp": lambda g, args, out, at: (g * out,),
    "log": lambda g, args, out, at: (np.where(args[0] > PROB_FLOOR, g / np.maximum(args[0], PROB_FLOOR), 0.0),),
    "softmax": _bwd_softmax,
    "log_softmax": _bwd_log_softmax,
    "sigmoid": _bwd_sigmoid,
    "log_sigmoid": _bwd_log_sigmoid,
    "clip": lambda g, args, out, at: (np.where((args[0] > at["lo"]) & (args[0] < at["hi"]), g, 0.0),),
    "slice_cols": _bwd_slice,
    "sum_rows": lambda g, args, out, at: (np.broadcast_to(g, args[0].shape).copy(),),
    "mean": lambda g, args, out, at: (np.broadcast_to(g / args[0].shape[0], args[0].shape).copy(),),
    "l1_diff": _bwd_l1,
    "stop_gradient": lambda g, args, out, at: (None,),
}

PRIMITIVES = tuple(op for op in _FORWARD if op != "const")


def finite_diff_grad(loss_fn: Callable[[dict], float], params: Mapping[str, np.ndarray],
                     h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``loss_fn`` receives a dict of arrays and must be deterministic.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn(base))
            flat[i] = orig - h
            f_minus = float(loss_fn(base))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"{name}[{i}]")
            g.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **settings) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, **settings)


def adam_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected ADAM step; inputs are left untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("params, grads and optimizer state cover different keys")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(k, p.shape, g.shape if g.shape != p.shape else state.m[k].shape)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_m[k], new_v[k] = m, v
        new_params[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_params, replace(state, m=new_m, v=new_v, t=t)


def seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def sample_standard_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)
