""" Reverse-mode automatic differentiation over dense float64 arrays.

    Every differentiable operation returns a new Tensor and, when one of its
    inputs requires a gradient, attaches a TapeRecord holding the inputs and
    the analytic backward rule. backward() sorts the records reachable from
    the loss into a Tape and replays it in reverse. Intermediate gradients
    live in a buffer local to that call; only leaves accumulate into .grad.
"""
import logging
from dataclasses import dataclass

import numpy as np

from instapbm.errors import DomainError, NumericalError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

ELEMENTWISE_KINDS = ('add', 'sub', 'mul', 'div', 'exp', 'log', 'relu', 'neg', 'scale')
BINARY_KINDS = ('add', 'sub', 'mul', 'div')
REDUCE_KINDS = ('sum', 'mean', 'max')


class Tensor:

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._record is None

    @property
    def grad(self):
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value
        self.grad_received = value is not None

    def item(self):
        if self.data.size != 1:
            raise ShapeError('item() needs a single value, got shape {}'.format(self.shape))
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return 'Tensor(shape={}, requires_grad={})'.format(self.shape, self.requires_grad)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce('sum', self, axis)

    def mean(self, axis=None):
        return reduce('mean', self, axis)

    def max(self, axis=None):
        return reduce('max', self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple
    output: Tensor
    backward_rule: object


class Tape:
    """ Records reachable from a loss, ordered so every record's inputs were
        produced by earlier records.
    """

    def __init__(self, records):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @classmethod
    def from_loss(cls, loss):
        order = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            record = node._record
            if record is None:
                continue
            if expanded:
                order.append(record)
                continue
            if id(record) in visited:
                continue
            visited.add(id(record))
            stack.append((node, True))
            for parent in record.inputs:
                if parent._record is not None and id(parent._record) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def replay_backward(self, loss, seed_grad):
        grads = {id(loss): seed_grad}
        for record in reversed(self.records):
            grad_out = grads.pop(id(record.output), None)
            if grad_out is None:
                continue
            input_grads = record.backward_rule(grad_out)
            for parent, grad in zip(record.inputs, input_grads):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    parent.grad = grad.copy() if parent.grad is None else parent.grad + grad
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + grad
                else:
                    grads[id(parent)] = grad


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(kind, data, inputs, backward_rule):
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out._record = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._record = TapeRecord(kind, tuple(inputs), out, backward_rule)
    return out


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError('Shapes {} and {} are not broadcast-compatible'.format(a.shape, b.shape))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result('add', a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result('sub', a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result('mul', a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise DomainError('Division by zero in div()')

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _result('div', a.data / b.data, (a, b), rule)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _result('exp', out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError('log() of non-positive value (min {})'.format(a.data.min()))
    return _result('log', np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _result('relu', a.data * mask, (a,), lambda g: (g * mask,))


def neg(a):
    a = as_tensor(a)
    return _result('neg', -a.data, (a,), lambda g: (-g,))


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)
    return _result('scale', a.data * factor, (a,), lambda g: (g * factor,))


def elementwise(op_kind, a, b=None, factor=None):
    """ Dispatch one of the elementwise kinds.
        Inputs:
            op_kind [str]: one of ELEMENTWISE_KINDS
            a [Tensor]: first operand
            b [Tensor]: second operand, binary kinds only
            factor [float]: multiplier, 'scale' only
        Output:
            out [Tensor]
    """
    if op_kind not in ELEMENTWISE_KINDS:
        raise ValidationError('Unknown elementwise kind {!r}'.format(op_kind))
    if op_kind in BINARY_KINDS:
        if b is None:
            raise ValidationError('{} needs a second operand'.format(op_kind))
        return {'add': add, 'sub': sub, 'mul': mul, 'div': div}[op_kind](a, b)
    if op_kind == 'scale':
        if factor is None:
            raise ValidationError('scale needs a factor')
        return scale(a, factor)
    return {'exp': exp, 'log': log, 'relu': relu, 'neg': neg}[op_kind](a)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError('matmul needs rank-2 operands, got {} and {}'.format(a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ShapeError('matmul inner dimensions differ: {} and {}'.format(a.shape, b.shape))
    return _result('matmul', a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError('transpose needs a rank-2 tensor, got {}'.format(a.shape))
    return _result('transpose', a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError('Cannot reshape {} into {}'.format(a.shape, shape))
    return _result('reshape', out_data, (a,), lambda g: (g.reshape(a.shape),))


def take_rows(a, indices):
    """ Gather rows a[indices]; repeated indices accumulate in backward. """
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if a.ndim < 1 or indices.ndim != 1:
        raise ShapeError('take_rows needs a tensor with rows and a 1-D index, got {} and {}'.format(a.shape, indices.shape))
    if indices.size and (indices.min() < -a.shape[0] or indices.max() >= a.shape[0]):
        raise ShapeError('Row index out of range for shape {}'.format(a.shape))

    def rule(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, indices, g)
        return (grad,)
    return _result('take_rows', a.data[indices], (a,), rule)


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ValidationError('Axis {} out of range for rank {}'.format(axis, ndim))
    return axis % ndim


def reduce(op_kind, a, axis=None):
    """ sum / mean / max along one axis, or over everything when axis is None. """
    if op_kind not in REDUCE_KINDS:
        raise ValidationError('Unknown reduce kind {!r}'.format(op_kind))
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, a.shape)
        return np.broadcast_to(np.expand_dims(g, axis), a.shape)

    if op_kind == 'sum':
        return _result('sum', np.asarray(a.data.sum(axis=axis)), (a,),
                       lambda g: (np.array(expand(g)),))
    if op_kind == 'mean':
        count = a.data.size if axis is None else a.shape[axis]
        return _result('mean', np.asarray(a.data.mean(axis=axis)), (a,),
                       lambda g: (np.array(expand(g)) / count,))
    if a.data.size == 0:
        raise ShapeError('max of an empty tensor')
    out_data = np.asarray(a.data.max(axis=axis))
    mask = (a.data == expand(out_data)).astype(np.float64)
    ties = mask.sum() if axis is None else np.expand_dims(mask.sum(axis=axis), axis)
    return _result('max', out_data, (a,), lambda g: (mask / ties * expand(g),))


def log_softmax(logits):
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError('log_softmax needs [batch, K] logits, got {}'.format(logits.shape))
    if logits.shape[1] < 2:
        raise ShapeError('log_softmax needs K >= 2, got {}'.format(logits.shape[1]))
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out_data)
    return _result('log_softmax', out_data, (logits,),
                   lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax(logits):
    return exp(log_softmax(logits))


def square(a):
    a = as_tensor(a)
    return mul(a, a)


def clamp_max(a, ceiling):
    """ min(a, ceiling), written as ceiling - relu(ceiling - a). """
    return sub(ceiling, relu(sub(ceiling, a)))


def zero_grads(tensors):
    """ Reset gradients to explicit zeros; grad_received stays False until a
        backward pass reaches the tensor again.
    """
    for tensor in tensors:
        tensor.grad = np.zeros_like(tensor.data)
        tensor.grad_received = False


def backward(loss):
    if loss.data.size != 1:
        raise ShapeError('backward() needs a scalar loss, got shape {}'.format(loss.shape))
    seed = np.ones_like(loss.data)
    if loss._record is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.from_loss(loss).replay_backward(loss, seed)


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    relative_errors: np.ndarray
    max_relative_error: float
    tol: float

    @property
    def passed(self):
        return self.max_relative_error < self.tol


def grad_check(fn, point, step=1e-5, tol=1e-4, floor=1e-3):
    """ Compare backward() against central finite differences.
        Inputs:
            fn [callable]: Tensor -> scalar Tensor
            point [Tensor or array]: where to check
            step [float]: finite-difference step
            tol [float]: pass threshold on the max relative error
            floor [float]: lower bound of the relative-error denominator
        Output:
            report [GradCheckReport]
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    def evaluate(values):
        value = fn(Tensor(values))
        scalar = value.item()
        if not np.isfinite(scalar):
            raise NumericalError('grad_check: function value is not finite ({})'.format(scalar))
        return scalar

    x = Tensor(base, requires_grad=True)
    value = fn(x)
    if not np.isfinite(value.item()):
        raise NumericalError('grad_check: function value is not finite ({})'.format(value.item()))
    backward(value)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    numeric = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[index] += step
        upper = evaluate(shifted)
        shifted[index] -= 2 * step
        lower = evaluate(shifted)
        numeric[index] = (upper - lower) / (2 * step)

    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    relative = np.abs(analytic - numeric) / denominator
    max_error = float(relative.max()) if relative.size else 0.0
    logger.debug('grad_check over %d coordinates, max relative error %.3e', base.size, max_error)
    return GradCheckReport(analytic, numeric, relative, max_error, tol)
