"""
Differentiable Arrays
---------------------
A small reverse-mode automatic differentiation core over numpy arrays.

Every model computation in this package is written with the operations in
this module. Each operation returns a DiffArray that remembers its parents
and a closure mapping the output gradient to the parents' gradients; calling
backward() on a scalar walks that graph in reverse topological order.

A Tape is created explicitly for each training step. Inputs enter the graph
through Tape.constant(); every node derived from them is recorded on the same
tape with a sequential tape_id. There is no module-level state: whether a node
tracks gradients is decided only by its inputs.
"""

import logging
from contextlib import contextmanager

import numpy as np

from core.errors import NumericalError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class Tape:
    """
    Single-owner record of the nodes built during one differentiation pass.

    Attributes:
        nodes (list): Recorded DiffArrays in creation order.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()
        return False

    def record(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def constant(self, value, dtype=None):
        """
        Bring an input array onto this tape. Constants never receive gradients.

        Args:
            value (array-like): Input values.
            dtype (numpy dtype, optional): Storage dtype; defaults to float32.

        Returns:
            DiffArray: Tape-owned constant.
        """
        return DiffArray(value, dtype=dtype, tape=self)

    def backward(self, loss):
        """
        Run the backward pass from a scalar built on this tape.

        Raises:
            UsageError: If the loss belongs to another tape.
        """
        if loss.tape is not None and loss.tape is not self:
            raise UsageError("Loss was recorded on a different tape")
        loss.backward()

    def release(self):
        self.nodes = []


class DiffArray:
    """
    Dense array participating in reverse-mode differentiation.

    Attributes:
        data (numpy.ndarray): Values, row-major.
        grad (numpy.ndarray or None): Accumulated gradient, same shape as data.
        requires_grad (bool): Whether gradients flow to or through this node.
        tape (Tape or None): Tape this node was recorded on.
        tape_id (int or None): Position of this node on its tape.
        name (str or None): Optional label used in diagnostics.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, tape=None, name=None):
        arr = np.asarray(data.data if isinstance(data, DiffArray) else data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self.tape = tape
        self.tape_id = tape.record(self) if tape is not None else None

    # Introspection

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # Operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # Differentiation

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """
        Accumulate gradients of this node into every reachable leaf.

        Args:
            grad (numpy.ndarray, optional): Seed gradient; required for
                non-scalar outputs.

        Raises:
            UsageError: If the node does not track gradients or a seed is missing.
        """
        if not self.requires_grad:
            raise UsageError("backward() called on a node that does not require grad")
        if grad is None:
            if self.size != 1:
                raise UsageError(f"backward() needs a seed gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g.astype(node.dtype) if node.grad is None else (node.grad + g).astype(node.dtype)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


class Parameter(DiffArray):
    """Trainable leaf array. Always tracks gradients unless frozen."""

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Module:
    """
    Container of Parameters and sub-Modules.

    Parameters are discovered from instance attributes in assignment order,
    including lists of Modules. A Parameter reachable under several names
    (tied storage) is reported once, under the first name found.
    """

    training = False

    def named_parameters(self, prefix=""):
        seen = set()
        for name, param in self._walk(prefix):
            if id(param) in seen:
                continue
            seen.add(id(param))
            yield name, param

    def _walk(self, prefix):
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value._walk(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_params(self):
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    @contextmanager
    def frozen(self):
        """Temporarily stop gradient tracking for all parameters."""
        params = self.parameters()
        previous = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, previous):
                p.requires_grad = flag


# Graph helpers


def _toposort(root):
    visited = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _common_tape(parents):
    tape = None
    for p in parents:
        if p.tape is None:
            continue
        if tape is None:
            tape = p.tape
        elif p.tape is not tape:
            raise UsageError("Operands were recorded on different tapes")
    return tape


def _lift(value, like=None):
    if isinstance(value, DiffArray):
        return value
    dtype = like.dtype if like is not None else None
    return DiffArray(value, dtype=dtype)


def _node(data, parents, backward):
    tape = _common_tape(parents)
    requires_grad = any(p.requires_grad for p in parents)
    out = DiffArray(data, requires_grad=requires_grad, tape=tape)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _pair(a, b):
    if isinstance(a, DiffArray):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def constant(value, dtype=None):
    """Wrap an array as a constant DiffArray that is not on any tape."""
    return DiffArray(value, dtype=dtype)


# Elementwise arithmetic


def add(a, b):
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _pair(a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a, exponent):
    exponent = float(exponent)
    out = np.power(a.data, exponent)
    return _node(out, (a,), lambda g: (g * exponent * np.power(a.data, exponent - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a):
    """x * sigmoid(x)."""
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s
    return _node(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def matmul(a, b):
    """Matrix product with numpy.matmul semantics (1-D and batched operands)."""
    a, b = _pair(a, b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        A, B = a.data, b.data
        a2 = A[None, :] if A.ndim == 1 else A
        b2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if A.ndim == 1:
            ga = np.squeeze(ga, -2)
        if B.ndim == 1:
            gb = np.squeeze(gb, -1)
        return ga, gb

    return _node(out, (a, b), backward)


# Reductions (accumulate in float64)


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return _node(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def cumsum(a, axis=-1):
    out = np.cumsum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)
    return _node(out, (a,), lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def logsumexp(a, axis=-1, keepdims=False):
    """
    Stable log(sum(exp(a))) along an axis.

    Entries may be -inf. When every entry along the axis is -inf the result
    is -inf and no gradient flows back.

    Args:
        a (DiffArray): Log-domain values.
        axis (int or None): Reduction axis; None reduces everything.
        keepdims (bool): Keep the reduced axis with size 1.

    Returns:
        DiffArray: Reduced log-sum.

    Raises:
        UsageError: If the reduced extent is empty.
    """
    a = _lift(a)
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise UsageError("logsumexp of an empty input")
    x = a.data.astype(np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    out = lse if keepdims else (np.squeeze(lse, axis=axis) if axis is not None else lse.reshape(()))

    def backward(g):
        g = _expand(g, a.shape, axis, keepdims) if not keepdims else g
        finite = np.isfinite(lse)
        weights = np.where(finite, np.exp(x - np.where(finite, lse, 0.0)), 0.0)
        return (g * weights,)

    return _node(out.astype(a.dtype), (a,), backward)


def logcumsumexp(a):
    """
    Running log-sum-exp of a vector: out[j] = log sum_{i <= j} exp(a[i]).

    Raises:
        UsageError: If the input is not a non-empty vector.
    """
    if a.ndim != 1 or a.size == 0:
        raise UsageError(f"logcumsumexp expects a non-empty vector, got shape {a.shape}")
    x = a.data.astype(np.float64)
    out = np.logaddexp.accumulate(x)

    def backward(g):
        n = x.size
        lower = np.tril(np.ones((n, n), dtype=bool))
        valid = lower & np.isfinite(out)[:, None] & np.isfinite(x)[None, :]
        diff = np.where(valid, x[None, :] - np.where(np.isfinite(out), out, 0.0)[:, None], -np.inf)
        weights = np.exp(diff)
        return (g.astype(np.float64) @ weights,)

    return _node(out.astype(a.dtype), (a,), backward)


def log_softmax(a, axis=-1, temperature=1.0):
    """
    log(softmax(a / temperature)) along an axis.

    Raises:
        UsageError: If temperature is not positive.
    """
    if temperature <= 0:
        raise UsageError(f"Temperature must be positive, got {temperature}")
    z = a.data.astype(np.float64) / temperature
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((g64 - probs * np.sum(g64, axis=axis, keepdims=True)) / temperature,)

    return _node(out.astype(a.dtype), (a,), backward)


def softmax(a, axis=-1, temperature=1.0):
    return exp(log_softmax(a, axis=axis, temperature=temperature))


def softmax_with_temperature(logits, temperature=1.0):
    """
    Probability vector softmax(logits / temperature).

    Args:
        logits (DiffArray or array-like): Finite logits.
        temperature (float): Positive temperature.

    Returns:
        DiffArray: Probabilities summing to one along the last axis.

    Raises:
        UsageError: If temperature is not positive.
    """
    return softmax(_lift(logits), axis=-1, temperature=temperature)


# Shape manipulation


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (np.reshape(g, a.shape),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index):
    if isinstance(index, DiffArray):
        raise UsageError("Indices must be integer arrays, not DiffArrays")
    out = a.data[index]

    def backward(g):
        full = np.zeros(a.shape, dtype=np.result_type(a.dtype, g.dtype))
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward)


def concat(arrays, axis=0):
    arrays = [_lift(x) for x in arrays]
    out = np.concatenate([x.data for x in arrays], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _node(out, arrays, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(arrays, axis=0):
    arrays = [_lift(x) for x in arrays]
    out = np.stack([x.data for x in arrays], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(arrays)))

    return _node(out, arrays, backward)


# Masking and regularisation


def masked_fill(a, mask, value):
    """Replace entries where mask is True; no gradient flows through them."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _node(out, (a,), lambda g: (np.where(mask, 0.0, g),))


def dropout(a, rate, rng, training):
    """
    Inverted dropout. Returns the input unchanged when not training.

    Args:
        a (DiffArray): Activations.
        rate (float): Drop probability in [0, 1).
        rng (Rng): Stream the keep mask is drawn from.
        training (bool): Apply dropout only when True.
    """
    if not training or rate <= 0.0:
        return a
    keep = rng.bernoulli(1.0 - rate, a.shape).astype(a.dtype) / (1.0 - rate)
    return mul(a, DiffArray(keep, dtype=a.dtype))


def layer_norm(a, scale, shift, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    mu = mean(a, axis=-1, keepdims=True)
    centred = a - mu
    var = mean(centred * centred, axis=-1, keepdims=True)
    return centred * pow_scalar(var + eps, -0.5) * scale + shift


# Gradient verification


def finite_difference_gradient(f, x, eps=1e-3):
    """
    Central-difference gradient of a scalar function.

    Args:
        f (callable): Deterministic function mapping an array shaped like x
            to a float.
        x (numpy.ndarray): Point at which to differentiate.
        eps (float): Step size.

    Returns:
        numpy.ndarray: Estimate of df/dx with x's shape, in float64.

    Raises:
        UsageError: If eps is not positive.
        NumericalError: If f is non-finite at a perturbed point.
    """
    if eps <= 0:
        raise UsageError(f"eps must be positive, got {eps}")
    x = np.array(x, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + eps
        plus = float(f(x))
        x[index] = original - eps
        minus = float(f(x))
        x[index] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericalError(f"Non-finite function value at coordinate {index}", index=index)
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def gradients_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    """
    True when every coordinate satisfies |a - n| <= max(rtol * max(|a|, |n|), atol).
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    bound = np.maximum(rtol * np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return bool(np.all(np.abs(analytic - numeric) <= bound))


def check_parameter_gradients(loss_fn, params, eps=1e-6, rtol=1e-4, atol=1e-6):
    """
    Compare autodiff and finite-difference gradients of loss_fn for each parameter.

    loss_fn takes no arguments and rebuilds the scalar loss from the current
    parameter values, so it can be re-evaluated after in-place perturbation.

    Args:
        loss_fn (callable): () -> scalar DiffArray.
        params (list): (name, Parameter) pairs to check.
        eps (float): Finite-difference step.
        rtol (float): Relative tolerance.
        atol (float): Absolute tolerance.

    Returns:
        dict: name -> (passed, max_abs_difference).
    """
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    report = {}
    for name, p in params:
        analytic = np.array(p.grad, dtype=np.float64)

        def evaluate(values, p=p):
            saved = p.data
            p.data = values.astype(saved.dtype)
            try:
                return loss_fn().item()
            finally:
                p.data = saved

        numeric = finite_difference_gradient(evaluate, p.data, eps)
        passed = gradients_close(analytic, numeric, rtol, atol)
        report[name] = (passed, float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0)
        if not passed:
            logger.warning(f"Gradient mismatch for {name}: max |diff| {report[name][1]:.3e}")
    return report
