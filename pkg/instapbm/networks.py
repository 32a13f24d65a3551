""" The predictive model f = h . g as MLPs over flattened inputs, the
    auxiliary pretext heads h_t, optimizers and checkpoints.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from instapbm.errors import ShapeError, ValidationError
from instapbm.tensor_engine import Tensor, as_tensor, log_softmax, matmul, relu
from instapbm.transforms import TASK_CLASS_COUNTS

logger = logging.getLogger(__name__)

LABEL_HEAD = 'label'
DEFAULT_HIDDEN = (128, 64)


@dataclass
class ModelParams:
    """ phi: [W, b, ...] of the feature extractor g (every layer ReLU'd).
        psi: [W, b] of the label head h.
        omega: task id -> [W, b] of the auxiliary head h_t.
    """
    layer_sizes: list
    seed: int
    phi: list
    psi: list
    omega: dict = field(default_factory=dict)

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def latent_dim(self):
        return self.layer_sizes[-2]

    @property
    def class_count(self):
        return self.layer_sizes[-1]

    @property
    def tasks(self):
        return sorted(self.omega)

    def parameters(self):
        """ (name, Tensor) pairs in declaration order phi, psi, omega. """
        named = []
        for prefix, tensors in [('phi', self.phi), ('psi', self.psi)] + \
                [('omega.' + task, self.omega[task]) for task in self.tasks]:
            for index, tensor in enumerate(tensors):
                kind = 'weight' if index % 2 == 0 else 'bias'
                named.append(('{}.{}.{}'.format(prefix, index // 2, kind), tensor))
        return named

    def tensors(self):
        return [tensor for _, tensor in self.parameters()]


def _dense(rng, fan_in, fan_out):
    # uniform(-b, b) with b = sqrt(6 / fan_in) has std sqrt(2 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    bias = Tensor(np.zeros(fan_out), requires_grad=True)
    return [weight, bias]


def init_params(spec, seed, tasks=()):
    """ Draw Kaiming-uniform weights and zero biases.
        Inputs:
            spec [list]: layer sizes [input, hidden..., latent, K]
            seed [int]: RNG seed
            tasks [iterable]: pretext task ids that get an auxiliary head
        Output:
            params [ModelParams]
    """
    spec = [int(size) for size in spec]
    if len(spec) == 0:
        raise ValidationError('Layer spec is empty')
    if len(spec) < 3:
        raise ValidationError('Layer spec needs input, latent and class sizes, got {}'.format(spec))
    if min(spec) < 1:
        raise ValidationError('Layer sizes must be >= 1, got {}'.format(spec))
    unknown = [task for task in tasks if task not in TASK_CLASS_COUNTS]
    if unknown:
        raise ValidationError('Unknown pretext tasks {}'.format(unknown))

    rng = np.random.default_rng(seed)
    phi = []
    for fan_in, fan_out in zip(spec[:-2], spec[1:-1]):
        phi.extend(_dense(rng, fan_in, fan_out))
    psi = _dense(rng, spec[-2], spec[-1])
    omega = {task: _dense(rng, spec[-2], TASK_CLASS_COUNTS[task]) for task in sorted(set(tasks))}
    return ModelParams(layer_sizes=spec, seed=int(seed), phi=phi, psi=psi, omega=omega)


def _flat_input(params, x):
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError('Input shape {} does not match model input dim {}'.format(x.shape, params.input_dim))
    return x


def features(params, x):
    """ Z = g(x), every layer followed by ReLU. """
    hidden = _flat_input(params, x)
    for index in range(0, len(params.phi), 2):
        hidden = relu(matmul(hidden, params.phi[index]) + params.phi[index + 1])
    return hidden


def head_logits(params, z, head=LABEL_HEAD):
    if head == LABEL_HEAD:
        weight, bias = params.psi
    elif head in params.omega:
        weight, bias = params.omega[head]
    else:
        raise ValidationError('Unknown head {!r}; model has {}'.format(head, [LABEL_HEAD] + params.tasks))
    return matmul(z, weight) + bias


def forward(params, x, head=LABEL_HEAD):
    return head_logits(params, features(params, x), head)


def predict_proba(params, x):
    """ Class probabilities as a plain array (no gradients kept). """
    logits = forward(params, Tensor(np.asarray(x, dtype=np.float64)), LABEL_HEAD)
    return np.exp(log_softmax(logits.detach()).data)


@dataclass
class OptimState:
    kind: str = 'adam'
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ('sgd_momentum', 'adam'):
            raise ValidationError('Unknown optimizer kind {!r}'.format(self.kind))
        if not self.lr > 0:
            raise ValidationError('Learning rate must be > 0, got {}'.format(self.lr))
        if self.weight_decay < 0:
            raise ValidationError('Weight decay must be >= 0, got {}'.format(self.weight_decay))


def step(params, opt):
    """ Apply one optimizer update to every tensor the last backward pass
        reached. Tensors whose gradient was only zeroed (an auxiliary head
        the objective never touched) keep their values and buffers.
        Gradients are left for the caller to zero.
    """
    named = params.parameters()
    live = [(name, tensor) for name, tensor in named if tensor.grad is not None and tensor.grad_received]
    if not live:
        raise ValidationError('No parameter received a gradient: {}'.format(', '.join(name for name, _ in named)))
    opt.step_count += 1
    for name, tensor in live:
        grad = tensor.grad
        if opt.weight_decay:
            grad = grad + opt.weight_decay * tensor.data
        if opt.kind == 'sgd_momentum':
            velocity = opt.buffers.get(name)
            velocity = grad if velocity is None else opt.momentum * velocity + grad
            opt.buffers[name] = velocity
            tensor.data = tensor.data - opt.lr * velocity
        else:
            first, second, count = opt.buffers.get(name, (np.zeros_like(grad), np.zeros_like(grad), 0))
            count += 1
            first = opt.beta1 * first + (1 - opt.beta1) * grad
            second = opt.beta2 * second + (1 - opt.beta2) * grad * grad
            opt.buffers[name] = (first, second, count)
            # bias correction uses the tensor's own update count
            first_hat = first / (1 - opt.beta1 ** count)
            second_hat = second / (1 - opt.beta2 ** count)
            tensor.data = tensor.data - opt.lr * first_hat / (np.sqrt(second_hat) + opt.eps)


def save_checkpoint(path, params, step_count=0):
    """ 8-byte little-endian header length, JSON header, float64 LE blob. """
    named = params.parameters()
    header = {
        'layer_sizes': params.layer_sizes,
        'seed': params.seed,
        'step': int(step_count),
        'tasks': params.tasks,
        'shapes': [[name, list(tensor.shape)] for name, tensor in named],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as handle:
        handle.write(np.array([len(header_bytes)], dtype='<u8').tobytes())
        handle.write(header_bytes)
        for _, tensor in named:
            handle.write(tensor.data.astype('<f8').tobytes(order='C'))
    logger.info('Saved checkpoint %s (%d tensors)', path, len(named))


def load_checkpoint(path):
    with open(path, 'rb') as handle:
        raw = handle.read()
    if len(raw) < 8:
        raise ValidationError('Checkpoint {} is truncated'.format(path))
    header_len = int(np.frombuffer(raw[:8], dtype='<u8')[0])
    header = json.loads(raw[8:8 + header_len].decode('utf-8'))
    blob = np.frombuffer(raw[8 + header_len:], dtype='<f8')

    params = init_params(header['layer_sizes'], header['seed'], header['tasks'])
    named = params.parameters()
    expected = sum(int(np.prod(shape)) for _, shape in header['shapes'])
    if blob.size != expected or len(named) != len(header['shapes']):
        raise ValidationError('Checkpoint {} holds {} values, header expects {}'.format(path, blob.size, expected))
    offset = 0
    for (name, tensor), (saved_name, shape) in zip(named, header['shapes']):
        if name != saved_name or list(tensor.shape) != shape:
            raise ValidationError('Checkpoint tensor {} {} does not match model {} {}'.format(
                saved_name, shape, name, list(tensor.shape)))
        count = int(np.prod(shape))
        tensor.data = blob[offset:offset + count].reshape(shape).astype(np.float64)
        offset += count
    return params, header
