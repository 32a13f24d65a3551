""" Training objectives.

    mim_loss, cpbm_loss, mupbm_loss and tpbm_loss are the four predictive
    behavior matching terms; total_objective weighs them together with the
    source cross-entropy. mmd_distance / coral_distance instantiate the
    distance D of the distributional matching baselines (dm_objective).
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from instapbm import networks
from instapbm.errors import ShapeError, ValidationError
from instapbm.tensor_engine import (Tensor, as_tensor, clamp_max, exp, log_softmax, matmul,
                                    neg, reduce, reshape, scale, square, take_rows, transpose)
from instapbm.transforms import TASK_CLASS_COUNTS, mixup_interpolate, resolve_sp_kinds

logger = logging.getLogger(__name__)

MARGINAL_FLOOR = 1e-6
MUPBM_DIRECTIONS = ('target_to_prediction', 'prediction_to_target')
MARGINAL_SOURCES = ('target', 'source')
DEFAULT_BANDWIDTH_MULTIPLIERS = (0.5, 1.0, 2.0, 4.0)
TERM_NAMES = ('supervised', 'mim', 'cpbm', 'mupbm', 'tpbm')


@dataclass
class LossConfig:
    lambda_M: float = 1.0
    lambda_C: float = 1.0
    lambda_U: float = 0.5
    lambda_S: float = 0.5
    lambda_con: float = 0.1
    entropy_ceiling: float = None
    marginal_momentum: float = 0.1
    mixup_alpha: float = 0.2
    supervised_weight: float = 1.0
    disagreement_margin: float = 5.0
    cpbm_kinds: str = 'all'
    tpbm_tasks: tuple = ('rotate90', 'vflip', 'patch_location')
    mupbm_direction: str = 'target_to_prediction'
    label_smoothing: float = 0.01
    marginal_source: str = 'target'

    def __post_init__(self):
        self.tpbm_tasks = tuple(self.tpbm_tasks)
        if not isinstance(self.cpbm_kinds, str):
            self.cpbm_kinds = tuple(self.cpbm_kinds)
        self.validate()

    def validate(self):
        for name in ('lambda_M', 'lambda_C', 'lambda_U', 'lambda_S', 'lambda_con',
                     'supervised_weight', 'disagreement_margin'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError('{} must be finite and >= 0, got {}'.format(name, value))
        if not 0 < self.marginal_momentum < 1:
            raise ValidationError('marginal_momentum must lie in (0, 1), got {}'.format(self.marginal_momentum))
        if not self.mixup_alpha > 0:
            raise ValidationError('mixup_alpha must be > 0, got {}'.format(self.mixup_alpha))
        if self.entropy_ceiling is not None and not self.entropy_ceiling > 0:
            raise ValidationError('entropy_ceiling must be > 0, got {}'.format(self.entropy_ceiling))
        if self.mupbm_direction not in MUPBM_DIRECTIONS:
            raise ValidationError('mupbm_direction must be one of {}'.format(MUPBM_DIRECTIONS))
        if self.marginal_source not in MARGINAL_SOURCES:
            raise ValidationError('marginal_source must be one of {}'.format(MARGINAL_SOURCES))
        if not 0 <= self.label_smoothing < 1:
            raise ValidationError('label_smoothing must lie in [0, 1), got {}'.format(self.label_smoothing))
        resolve_sp_kinds(self.cpbm_kinds)
        unknown = [task for task in self.tpbm_tasks if task not in TASK_CLASS_COUNTS]
        if unknown:
            raise ValidationError('Unknown pretext tasks {}'.format(unknown))
        if self.lambda_S > 0 and not self.tpbm_tasks:
            raise ValidationError('lambda_S > 0 needs at least one pretext task')

    def ceiling_for(self, class_count):
        upper = math.log(class_count)
        if self.entropy_ceiling is None:
            return 0.95 * upper
        if self.entropy_ceiling > upper + 1e-12:
            raise ValidationError('entropy_ceiling {} exceeds ln K = {}'.format(self.entropy_ceiling, upper))
        return self.entropy_ceiling

    def term_weights(self):
        return {'supervised': self.supervised_weight, 'mim': self.lambda_M, 'cpbm': self.lambda_C,
                'mupbm': self.lambda_U, 'tpbm': self.lambda_S}


class MarginalTracker:
    """ Exponential moving average q(y) of the predicted class marginal. """

    def __init__(self, class_count, momentum=0.1, q=None):
        self.class_count = int(class_count)
        self.momentum = float(momentum)
        self.update_count = 0
        self.diversity_active = None
        if q is None:
            q = np.full(self.class_count, 1.0 / self.class_count)
        self.q = self._normalize(np.asarray(q, dtype=np.float64))

    def _normalize(self, q):
        if q.shape != (self.class_count,):
            raise ShapeError('Marginal of shape {} does not match K = {}'.format(q.shape, self.class_count))
        q = np.maximum(q, MARGINAL_FLOOR)
        return q / q.sum()

    def update(self, batch_mean):
        self.q = self._normalize((1 - self.momentum) * self.q + self.momentum * np.asarray(batch_mean))
        self.update_count += 1

    def entropy(self):
        return float(-(self.q * np.log(self.q)).sum())


def onehot(labels, class_count):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValidationError('Labels must lie in [0, {}), got range [{}, {}]'.format(
            class_count, labels.min(), labels.max()))
    encoded = np.zeros((labels.shape[0], class_count))
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def cross_entropy(logits, labels):
    logits = as_tensor(logits)
    targets = Tensor(onehot(labels, logits.shape[1]))
    return neg(reduce('mean', reduce('sum', targets * log_softmax(logits), axis=1)))


def soft_cross_entropy(logits, targets):
    targets = Tensor(np.asarray(targets, dtype=np.float64))
    return neg(reduce('mean', reduce('sum', targets * log_softmax(logits), axis=1)))


def _kl_rows(logits_p, logits_q):
    """ Per-row KL(p || q) between the softmax distributions of two logit sets. """
    log_p = log_softmax(logits_p)
    return reduce('sum', exp(log_p) * (log_p - log_softmax(logits_q)), axis=1)


def mim_loss(target_logits, tracker, ceiling, update_tracker=True):
    """ Conditional entropy H(Y|X) plus, while H(q) is below the ceiling,
        the diversity surrogate E_x sum_y p(y|x) log q(y) with q held fixed.
        Its gradient is sum_y grad p(y|x) log q(y).
        Inputs:
            target_logits [Tensor]: [batch, K]
            tracker [MarginalTracker]: moving-average marginal, updated afterwards
            ceiling [float]: entropy threshold for the diversity term
            update_tracker [bool]: False freezes q (gradient checks)
        Output:
            loss [Tensor]: scalar
    """
    target_logits = as_tensor(target_logits)
    if target_logits.ndim != 2 or target_logits.shape[1] != tracker.class_count:
        raise ShapeError('Logits {} do not match tracker K = {}'.format(target_logits.shape, tracker.class_count))
    log_p = log_softmax(target_logits)
    probs = exp(log_p)
    loss = neg(reduce('mean', reduce('sum', probs * log_p, axis=1)))
    tracker.diversity_active = tracker.entropy() < ceiling
    if tracker.diversity_active:
        diversity = reduce('mean', reduce('sum', probs * Tensor(np.log(tracker.q)), axis=1))
        loss = diversity + loss
    if update_tracker:
        tracker.update(probs.data.mean(axis=0))
    return loss


def cpbm_loss(logits_orig, logits_aug, src_logits_a, src_logits_b, diff_class_mask, lambda_con,
              margin=5.0):
    """ E[KL(p(y|x) || p(y|t(x)))] - lambda_con * E_{y != y'}[min(KL(p(y|x) || p(y'|x')), margin)] """
    logits_orig, logits_aug = as_tensor(logits_orig), as_tensor(logits_aug)
    src_logits_a, src_logits_b = as_tensor(src_logits_a), as_tensor(src_logits_b)
    if logits_orig.shape != logits_aug.shape:
        raise ShapeError('Original and augmented logits differ: {} vs {}'.format(logits_orig.shape, logits_aug.shape))
    if src_logits_a.shape != src_logits_b.shape:
        raise ShapeError('Source pair logits differ: {} vs {}'.format(src_logits_a.shape, src_logits_b.shape))
    mask = np.asarray(diff_class_mask, dtype=bool)
    if mask.shape != (src_logits_a.shape[0],):
        raise ShapeError('Pair mask {} does not match {} source rows'.format(mask.shape, src_logits_a.shape[0]))

    consistency = reduce('mean', _kl_rows(logits_orig, logits_aug))
    if not mask.any() or lambda_con == 0:
        return consistency
    per_pair = clamp_max(_kl_rows(src_logits_a, src_logits_b), margin)
    disagreement = reduce('sum', per_pair * Tensor(mask.astype(np.float64))) / float(mask.sum())
    return consistency - scale(disagreement, lambda_con)


def mupbm_loss(mixed_logits, mixed_targets, direction='target_to_prediction', smoothing=0.01):
    """ E[KL(q(y_si) || p(y | t(x, x', beta)))], gradient through the logits only.
        direction='prediction_to_target' evaluates KL(p || q) against targets
        smoothed by `smoothing` so one-hot rows stay finite.
    """
    mixed_logits = as_tensor(mixed_logits)
    targets = np.asarray(mixed_targets, dtype=np.float64)
    if targets.shape != mixed_logits.shape:
        raise ShapeError('Targets {} do not match logits {}'.format(targets.shape, mixed_logits.shape))
    if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError('Mixed targets must be probability vectors (rows summing to 1)')
    log_p = log_softmax(mixed_logits)
    if direction == 'target_to_prediction':
        positive = targets > 0
        neg_entropy = np.where(positive, targets * np.log(np.where(positive, targets, 1.0)), 0.0).sum(axis=1).mean()
        return soft_cross_entropy(mixed_logits, targets) + neg_entropy
    if direction == 'prediction_to_target':
        smoothed = (1 - smoothing) * targets + smoothing / targets.shape[1]
        return reduce('mean', reduce('sum', exp(log_p) * (log_p - Tensor(np.log(smoothed))), axis=1))
    raise ValidationError('Unknown mix-up KL direction {!r}'.format(direction))


def tpbm_loss(task_logits_by_task, task_labels_by_task):
    """ Mean over tasks of the pretext cross-entropy. """
    if set(task_logits_by_task) != set(task_labels_by_task):
        raise ValidationError('Pretext logits and labels name different tasks')
    if not task_logits_by_task:
        raise ValidationError('tpbm_loss needs at least one task')
    total = None
    for task in sorted(task_logits_by_task):
        logits = as_tensor(task_logits_by_task[task])
        if task not in TASK_CLASS_COUNTS:
            raise ValidationError('Unknown pretext task {!r}'.format(task))
        if logits.ndim != 2 or logits.shape[1] != TASK_CLASS_COUNTS[task]:
            raise ShapeError('{} logits need width {}, got {}'.format(task, TASK_CLASS_COUNTS[task], logits.shape))
        term = cross_entropy(logits, task_labels_by_task[task])
        total = term if total is None else total + term
    return scale(total, 1.0 / len(task_logits_by_task))


def _check_feature_sets(z_src, z_tgt):
    z_src, z_tgt = as_tensor(z_src), as_tensor(z_tgt)
    if z_src.ndim != 2 or z_tgt.ndim != 2 or z_src.shape[1] != z_tgt.shape[1]:
        raise ShapeError('Feature sets need matching width: {} vs {}'.format(z_src.shape, z_tgt.shape))
    if z_src.shape[0] == 0 or z_tgt.shape[0] == 0:
        raise ValidationError('Feature sets must not be empty')
    return z_src, z_tgt


def median_bandwidths(z_src, z_tgt, multipliers=DEFAULT_BANDWIDTH_MULTIPLIERS):
    """ Multiples of the median pairwise distance of the joint batch (frozen). """
    joint = np.vstack([np.asarray(z_src, dtype=np.float64), np.asarray(z_tgt, dtype=np.float64)])
    distances = pdist(joint) if joint.shape[0] > 1 else np.zeros(1)
    median = float(np.median(distances))
    if median <= 0:
        median = 1.0
    return [multiplier * median for multiplier in multipliers]


def _sq_distances(a, b):
    sq_a = reshape(reduce('sum', square(a), axis=1), (a.shape[0], 1))
    sq_b = reshape(reduce('sum', square(b), axis=1), (1, b.shape[0]))
    return sq_a + sq_b - scale(matmul(a, transpose(b)), 2.0)


def _kernel(a, b, bandwidths, kernel):
    if kernel == 'linear':
        return matmul(a, transpose(b))
    distances = _sq_distances(a, b)
    total = None
    for bandwidth in bandwidths:
        term = exp(scale(distances, -1.0 / (2.0 * bandwidth * bandwidth)))
        total = term if total is None else total + term
    return total


def mmd_distance(z_src, z_tgt, bandwidths=None, kernel='rbf'):
    """ Biased MMD^2 with a sum of RBF kernels (or the linear kernel).
        Inputs:
            z_src [Tensor]: [n, d] source features
            z_tgt [Tensor]: [m, d] target features
            bandwidths [list]: RBF widths; median heuristic if None
            kernel [str]: 'rbf' or 'linear'
        Output:
            mmd2 [Tensor]: scalar
    """
    z_src, z_tgt = _check_feature_sets(z_src, z_tgt)
    if kernel not in ('rbf', 'linear'):
        raise ValidationError('Unknown kernel {!r}'.format(kernel))
    if kernel == 'rbf' and bandwidths is None:
        bandwidths = median_bandwidths(z_src.data, z_tgt.data)
    k_ss = reduce('mean', _kernel(z_src, z_src, bandwidths, kernel))
    k_tt = reduce('mean', _kernel(z_tgt, z_tgt, bandwidths, kernel))
    k_st = reduce('mean', _kernel(z_src, z_tgt, bandwidths, kernel))
    return k_ss + k_tt - scale(k_st, 2.0)


def _covariance(z):
    rows = z.shape[0]
    if rows < 2:
        raise ValidationError('Covariance needs at least 2 rows, got {}'.format(rows))
    centered = z - reduce('mean', z, axis=0)
    return scale(matmul(transpose(centered), centered), 1.0 / (rows - 1))


def coral_distance(z_src, z_tgt):
    """ ||C_S - C_T||_F^2 / (4 d^2) """
    z_src, z_tgt = _check_feature_sets(z_src, z_tgt)
    width = z_src.shape[1]
    difference = _covariance(z_src) - _covariance(z_tgt)
    return scale(reduce('sum', square(difference)), 1.0 / (4.0 * width * width))


@dataclass
class BatchBundle:
    """ One training step's inputs. Transform fields stay None when the term
        that needs them has zero weight.
    """
    x_src: np.ndarray
    y_src: np.ndarray
    x_tgt: np.ndarray
    src_aug: np.ndarray = None
    tgt_aug: np.ndarray = None
    pair_index: np.ndarray = None
    mix_index_a: np.ndarray = None
    mix_index_b: np.ndarray = None
    mix_betas: np.ndarray = None
    st_inputs: dict = field(default_factory=dict)
    st_labels: dict = field(default_factory=dict)


@dataclass
class ObjectiveReport:
    values: dict
    weights: dict
    total: float

    def weighted_sum(self):
        return sum(self.weights[name] * value for name, value in self.values.items())


def _accumulate(parts, name, weight, term):
    parts.append((name, weight, term))


def _combine(parts):
    total = None
    for _, weight, term in parts:
        weighted = scale(term, weight)
        total = weighted if total is None else total + weighted
    report = ObjectiveReport(values={name: term.item() for name, _, term in parts},
                             weights={name: weight for name, weight, _ in parts},
                             total=total.item())
    return total, report


def total_objective(bundle, params, cfg, tracker, update_tracker=True):
    """ supervised_weight * CE_source + lambda_M L_M + lambda_C L_C + lambda_U L_U + lambda_S L_S.
        Terms with zero weight are skipped entirely.
        Inputs:
            bundle [BatchBundle]: source batch, target batch and transform outputs
            params [ModelParams]: model
            cfg [LossConfig]: weights and term options
            tracker [MarginalTracker]: marginal for the MIM term
            update_tracker [bool]: False leaves q untouched
        Outputs:
            loss [Tensor]: scalar
            report [ObjectiveReport]: per-term values and weights
    """
    weights = cfg.term_weights()
    active = {name for name, weight in weights.items() if weight > 0}
    if not active:
        raise ValidationError('Objective has no active term (all weights are zero)')
    n_src = bundle.x_src.shape[0]
    class_count = params.class_count
    needs_target = bool(active & {'cpbm', 'mupbm'}) or ('mim' in active and cfg.marginal_source == 'target')

    if needs_target:
        joint_x = np.vstack([bundle.x_src, bundle.x_tgt])
        joint_logits = networks.forward(params, Tensor(joint_x))
        src_logits = take_rows(joint_logits, np.arange(n_src))
        tgt_logits = take_rows(joint_logits, np.arange(n_src, joint_x.shape[0]))
    else:
        joint_x, joint_logits, tgt_logits = None, None, None
        src_logits = networks.forward(params, Tensor(bundle.x_src))

    parts = []
    if 'supervised' in active:
        _accumulate(parts, 'supervised', weights['supervised'], cross_entropy(src_logits, bundle.y_src))
    if 'mim' in active:
        mim_logits = tgt_logits if cfg.marginal_source == 'target' else src_logits
        _accumulate(parts, 'mim', weights['mim'],
                    mim_loss(mim_logits, tracker, cfg.ceiling_for(class_count), update_tracker))
    if 'cpbm' in active:
        aug_logits = networks.forward(params, Tensor(np.vstack([bundle.src_aug, bundle.tgt_aug])))
        partner_logits = take_rows(src_logits, bundle.pair_index)
        diff_mask = bundle.y_src != bundle.y_src[bundle.pair_index]
        _accumulate(parts, 'cpbm', weights['cpbm'],
                    cpbm_loss(joint_logits, aug_logits, src_logits, partner_logits, diff_mask,
                              cfg.lambda_con, cfg.disagreement_margin))
    if 'mupbm' in active:
        soft_labels = np.vstack([onehot(bundle.y_src, class_count), np.exp(log_softmax(tgt_logits.detach()).data)])
        mixed_x, mixed_y = mixup_interpolate(joint_x[bundle.mix_index_a], joint_x[bundle.mix_index_b],
                                             soft_labels[bundle.mix_index_a], soft_labels[bundle.mix_index_b],
                                             bundle.mix_betas)
        mixed_logits = networks.forward(params, Tensor(mixed_x))
        _accumulate(parts, 'mupbm', weights['mupbm'],
                    mupbm_loss(mixed_logits, mixed_y, cfg.mupbm_direction, cfg.label_smoothing))
    if 'tpbm' in active:
        task_logits = {task: networks.forward(params, Tensor(bundle.st_inputs[task]), head=task)
                       for task in cfg.tpbm_tasks}
        task_labels = {task: bundle.st_labels[task] for task in cfg.tpbm_tasks}
        _accumulate(parts, 'tpbm', weights['tpbm'], tpbm_loss(task_logits, task_labels))
    return _combine(parts)


def dm_objective(bundle, params, distance, dm_weight, bandwidth_multipliers=DEFAULT_BANDWIDTH_MULTIPLIERS):
    """ CE_source + dm_weight * D(g(X_S), g(X_T)) with D in {'mmd', 'coral'}. """
    z_src = networks.features(params, Tensor(bundle.x_src))
    z_tgt = networks.features(params, Tensor(bundle.x_tgt))
    parts = [('supervised', 1.0, cross_entropy(networks.head_logits(params, z_src), bundle.y_src))]
    if distance == 'mmd':
        bandwidths = median_bandwidths(z_src.data, z_tgt.data, bandwidth_multipliers)
        term = mmd_distance(z_src, z_tgt, bandwidths)
    elif distance == 'coral':
        term = coral_distance(z_src, z_tgt)
    else:
        raise ValidationError('Unknown distance {!r}'.format(distance))
    parts.append(('dm', float(dm_weight), term))
    return _combine(parts)
