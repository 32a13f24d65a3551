""" Experiment orchestration: training loops for source-only, the
    distributional matching baselines and InstaPBM; evaluation; the ablation
    and method-comparison tables; glyph gap calibration; the label-shift
    failure curve and the gradient suite.
"""
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from instapbm import losses, networks
from instapbm.data_synth import (SOURCE, TARGET, GlyphDomainSpec, generate_blob_pair, generate_glyph_domain,
                                 shifted_target_spec)
from instapbm.errors import NonFiniteLossError, ShapeError, ValidationError
from instapbm.losses import BatchBundle, LossConfig, MarginalTracker
from instapbm.rds_bench import build_benchmark, tv_distance
from instapbm.tensor_engine import (Tensor, add, backward, clamp_max, div, exp, grad_check, log,
                                    log_softmax, matmul, mul, neg, reduce, relu, reshape, scale,
                                    softmax, square, sub, take_rows, transpose, zero_grads)
from instapbm.transforms import (ImageBatch, SemanticPreservingRanges, apply_semantic_preserving,
                                 apply_semantic_transforming, perturb_points, sample_mixup_betas)

logger = logging.getLogger(__name__)

METHODS = ('source_only', 'dm_mmd', 'dm_coral', 'instapbm')
DEFAULT_SEEDS = (17, 29, 41)
PBM_WEIGHTS = ('lambda_M', 'lambda_C', 'lambda_U', 'lambda_S')

# row -> (weights kept from the base config, extra loss overrides)
ABLATION_ROWS = {
    'Baseline': ((), {}),
    '+MIM': (('lambda_M',), {}),
    '+CPBM_RA': (('lambda_C',), {'cpbm_kinds': 'ra'}),
    '+CPBM_NI': (('lambda_C',), {'cpbm_kinds': 'ni'}),
    '+CPBM_ALL': (('lambda_C',), {'cpbm_kinds': 'all'}),
    '+MuPBM': (('lambda_U',), {}),
    '+TPBM_ROT': (('lambda_S',), {'tpbm_tasks': ('rotate90',)}),
    '+TPBM_QDR': (('lambda_S',), {'tpbm_tasks': ('patch_location',)}),
    '+TPBM_FLIP': (('lambda_S',), {'tpbm_tasks': ('vflip',)}),
    '+TPBM_ALL': (('lambda_S',), {'tpbm_tasks': ('rotate90', 'vflip', 'patch_location')}),
    '+InstaPBM': (PBM_WEIGHTS, {}),
}


def default_optimizer():
    return {'kind': 'adam', 'lr': 1e-3, 'momentum': 0.9, 'beta1': 0.9, 'beta2': 0.999,
            'eps': 1e-8, 'weight_decay': 1e-5}


@dataclass
class TrainConfig:
    method: str = 'instapbm'
    epochs: int = 200
    batch_size: int = 64
    optimizer: dict = field(default_factory=default_optimizer)
    loss: LossConfig = field(default_factory=LossConfig)
    ranges: SemanticPreservingRanges = field(default_factory=SemanticPreservingRanges)
    dm_weight: float = 1.0
    dm_ramp_steps: int = 10
    hidden: tuple = networks.DEFAULT_HIDDEN
    model_seed: int = 17
    data_seed: int = 17
    holdout_fraction: float = 0.2
    head_bias_init: tuple = None
    row: str = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.ranges, dict):
            self.ranges = SemanticPreservingRanges(**self.ranges)
        self.hidden = tuple(int(width) for width in self.hidden)
        if self.head_bias_init is not None:
            self.head_bias_init = tuple(float(value) for value in self.head_bias_init)
        self.optimizer = dict(default_optimizer(), **self.optimizer)
        if self.method not in METHODS:
            raise ValidationError('Unknown method {!r}; expected one of {}'.format(self.method, METHODS))
        if self.batch_size < 2:
            raise ValidationError('batch_size must be >= 2, got {}'.format(self.batch_size))
        if self.epochs < 1:
            raise ValidationError('epochs must be >= 1, got {}'.format(self.epochs))
        if not (math.isfinite(self.dm_weight) and self.dm_weight >= 0):
            raise ValidationError('dm_weight must be finite and >= 0, got {}'.format(self.dm_weight))
        if self.dm_ramp_steps < 0:
            raise ValidationError('dm_ramp_steps must be >= 0')
        if not 0 <= self.holdout_fraction < 1:
            raise ValidationError('holdout_fraction must lie in [0, 1), got {}'.format(self.holdout_fraction))
        if not self.hidden:
            raise ValidationError('hidden needs at least the latent width')
        self.optim_state()

    def optim_state(self):
        return networks.OptimState(**self.optimizer)

    def effective_loss(self):
        """ The loss configuration total_objective runs with: baselines keep only
            the supervised term.
        """
        if self.method == 'instapbm':
            return self.loss
        return replace(self.loss, **{name: 0.0 for name in PBM_WEIGHTS})

    def dm_weight_at(self, global_step):
        if self.dm_ramp_steps == 0:
            return self.dm_weight
        return self.dm_weight * min(1.0, global_step / float(self.dm_ramp_steps))

    def to_dict(self):
        return jsonable(asdict(self))


def row_config(base_cfg, row, seed=None):
    """ TrainConfig for one ablation row (optionally re-seeded). """
    if row not in ABLATION_ROWS:
        raise ValidationError('Unknown ablation row {!r}'.format(row))
    kept, overrides = ABLATION_ROWS[row]
    weights = {name: (getattr(base_cfg.loss, name) if name in kept else 0.0) for name in PBM_WEIGHTS}
    loss = replace(base_cfg.loss, **dict(weights, **overrides))
    changes = {'loss': loss, 'row': row, 'method': 'source_only' if row == 'Baseline' else 'instapbm'}
    if seed is not None:
        changes.update(model_seed=int(seed), data_seed=int(seed))
    return replace(base_cfg, **changes)


def jsonable(value):
    if isinstance(value, dict):
        return {str(key): jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    return value


@dataclass
class Evaluation:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())


def evaluate(params, ds):
    """ Argmax accuracy, per-class accuracy and confusion matrix over the
        labeled rows of ds (outliers are excluded).
        Inputs:
            params [ModelParams]: model
            ds [DomainDataset]: evaluation data
        Output:
            result [Evaluation]
    """
    labeled = ds.labeled_mask
    if not labeled.any():
        raise ValidationError('Cannot evaluate on a dataset without labeled samples')
    if ds.class_count != params.class_count:
        raise ValidationError('Dataset has K = {}, model has K = {}'.format(ds.class_count, params.class_count))
    truth = ds.labels[labeled]
    predicted = np.argmax(networks.predict_proba(params, ds.flat()[labeled]), axis=1)
    confusion = np.zeros((ds.class_count, ds.class_count), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), np.nan)
    return Evaluation(float(np.mean(predicted == truth)), per_class, confusion, counts)


@dataclass
class Metrics:
    """ epochs: one record per epoch; final: accuracies and last-epoch losses. """
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    confusion: np.ndarray = None

    @property
    def target_accuracy(self):
        return self.final.get('target_accuracy')


class RunWriter:
    """ Run directory: config.json, metrics.jsonl, summary.json, confusion.csv,
        checkpoint.bin.
    """

    def __init__(self, out_dir):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.metrics_path = os.path.join(out_dir, 'metrics.jsonl')
        open(self.metrics_path, 'w').close()

    def _path(self, name):
        return os.path.join(self.out_dir, name)

    def write_config(self, cfg):
        with open(self._path('config.json'), 'w') as handle:
            json.dump(cfg.to_dict(), handle, indent=2, sort_keys=True)

    def append_epoch(self, record):
        with open(self.metrics_path, 'a') as handle:
            handle.write(json.dumps(jsonable(record), sort_keys=True) + '\n')

    def write_summary(self, summary):
        with open(self._path('summary.json'), 'w') as handle:
            json.dump(jsonable(summary), handle, indent=2, sort_keys=True)

    def write_confusion(self, confusion):
        labels = ['class_{}'.format(k) for k in range(confusion.shape[0])]
        pd.DataFrame(confusion, index=labels, columns=labels).to_csv(self._path('confusion.csv'))

    def write_checkpoint(self, params, step_count):
        networks.save_checkpoint(self._path('checkpoint.bin'), params, step_count)


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(part) for part in parts]).generate_state(1)[0])


def build_batch_bundle(loss_cfg, x_src, y_src, x_tgt, seed, ranges=None):
    """ Flatten the batches and run only the transforms the active terms need.
        Inputs:
            loss_cfg [LossConfig]: decides which transforms run
            x_src [np.ndarray]: [B, H, W] images or [B, d] points
            y_src [np.ndarray]: source labels
            x_tgt [np.ndarray]: target batch, same layout as x_src
            seed [int]: step seed; every transform family derives from it
            ranges [SemanticPreservingRanges]: augmentation magnitudes
        Output:
            bundle [BatchBundle]
    """
    ranges = ranges or SemanticPreservingRanges()
    is_image = x_src.ndim == 3
    n_src, n_tgt = x_src.shape[0], x_tgt.shape[0]
    bundle = BatchBundle(x_src.reshape(n_src, -1), np.asarray(y_src, dtype=np.int64), x_tgt.reshape(n_tgt, -1))
    rng = np.random.default_rng([seed, 5])

    if loss_cfg.lambda_C > 0:
        joint = np.concatenate([x_src, x_tgt])
        if is_image:
            augmented = apply_semantic_preserving(ImageBatch(joint), seed, loss_cfg.cpbm_kinds, ranges).flatten()
        else:
            augmented = perturb_points(joint, ranges.noise_sigma, seed)
        bundle.src_aug, bundle.tgt_aug = augmented[:n_src], augmented[n_src:]
        bundle.pair_index = rng.permutation(n_src)
    if loss_cfg.lambda_U > 0:
        joint_size = n_src + n_tgt
        bundle.mix_index_a = np.arange(joint_size)
        bundle.mix_index_b = rng.permutation(joint_size)
        bundle.mix_betas = sample_mixup_betas(joint_size, loss_cfg.mixup_alpha, seed)
    if loss_cfg.lambda_S > 0:
        if not is_image:
            raise ValidationError('Pretext tasks need image inputs')
        images = ImageBatch(np.concatenate([x_src, x_tgt]))
        for task in loss_cfg.tpbm_tasks:
            transformed, labels = apply_semantic_transforming(images, task, seed)
            bundle.st_inputs[task] = transformed.flatten()
            bundle.st_labels[task] = labels
    return bundle


def _split_target(tgt, fraction, seed):
    """ (adaptation, holdout) split; holdout is the adaptation set when fraction is 0. """
    if fraction == 0:
        return tgt, tgt
    order = np.random.default_rng([seed, 7]).permutation(len(tgt))
    n_hold = int(round(fraction * len(tgt)))
    return tgt.subset(np.sort(order[n_hold:])), tgt.subset(np.sort(order[:n_hold]))


def _check_pair(src, tgt):
    if src.class_count != tgt.class_count:
        raise ValidationError('Source has K = {}, target has K = {}'.format(src.class_count, tgt.class_count))
    if src.geometry != tgt.geometry:
        raise ShapeError('Source geometry {} does not match target {}'.format(src.geometry, tgt.geometry))


def _step_objective(cfg, loss_cfg, bundle, params, tracker, global_step):
    if cfg.method in ('dm_mmd', 'dm_coral'):
        distance = 'mmd' if cfg.method == 'dm_mmd' else 'coral'
        return losses.dm_objective(bundle, params, distance, cfg.dm_weight_at(global_step))
    return losses.total_objective(bundle, params, loss_cfg, tracker)


def _check_finite(report):
    for name, value in report.values.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    if not math.isfinite(report.total):
        raise NonFiniteLossError('total', report.total)


def train(cfg, src, tgt, writer=None):
    """ Run the method cfg selects on a (source, target) pair.
        Inputs:
            cfg [TrainConfig]: method and hyperparameters
            src [DomainDataset]: labeled source
            tgt [DomainDataset]: target; labels are used for evaluation only
            writer [RunWriter]: optional run directory
        Outputs:
            params [ModelParams]: trained model
            metrics [Metrics]: per-epoch records and final evaluation
    """
    _check_pair(src, tgt)
    loss_cfg = cfg.effective_loss()
    if loss_cfg.lambda_S > 0 and not src.is_image:
        raise ValidationError('Pretext tasks need image datasets; set lambda_S to 0 for point data')
    src = src.subset(np.flatnonzero(src.labeled_mask))
    adapt, holdout = _split_target(tgt, cfg.holdout_fraction, cfg.data_seed)
    batch = min(cfg.batch_size, len(src), len(adapt))
    if batch < 2:
        raise ValidationError('Need at least 2 source and 2 target samples per batch')

    tasks = loss_cfg.tpbm_tasks if loss_cfg.lambda_S > 0 else ()
    params = networks.init_params([int(np.prod(src.geometry))] + list(cfg.hidden) + [src.class_count],
                                  cfg.model_seed, tasks)
    if cfg.head_bias_init is not None:
        if len(cfg.head_bias_init) != src.class_count:
            raise ValidationError('head_bias_init has {} entries for K = {}'.format(
                len(cfg.head_bias_init), src.class_count))
        params.psi[1].data = np.array(cfg.head_bias_init)
    opt = cfg.optim_state()
    # q starts at the initial mean prediction, so a collapsed head starts with low H(q)
    tracker = MarginalTracker(src.class_count, loss_cfg.marginal_momentum,
                              networks.predict_proba(params, adapt.flat()).mean(axis=0))
    mim_active = cfg.method == 'instapbm' and loss_cfg.lambda_M > 0
    metrics = Metrics()
    if writer is not None:
        writer.write_config(cfg)

    steps_per_epoch = max(1, len(src) // batch)
    logger.info('Training %s%s: %d epochs x %d steps, batch %d', cfg.method,
                ' ({})'.format(cfg.row) if cfg.row else '', cfg.epochs, steps_per_epoch, batch)
    global_step = 0
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng([cfg.data_seed, epoch, 3])
        src_order = order_rng.permutation(len(src))
        tgt_order = order_rng.permutation(len(adapt))
        sums = {}
        for step_index in range(steps_per_epoch):
            global_step += 1
            src_rows = src_order[step_index * batch:(step_index + 1) * batch]
            tgt_rows = tgt_order[(step_index * batch + np.arange(batch)) % len(adapt)]
            bundle = build_batch_bundle(loss_cfg, src.samples[src_rows], src.labels[src_rows],
                                        adapt.samples[tgt_rows], derive_seed(cfg.data_seed, epoch, step_index),
                                        cfg.ranges)
            loss, report = _step_objective(cfg, loss_cfg, bundle, params, tracker, global_step)
            _check_finite(report)
            zero_grads(params.tensors())
            backward(loss)
            networks.step(params, opt)
            for name, value in report.values.items():
                sums[name] = sums.get(name, 0.0) + value
            sums['total'] = sums.get('total', 0.0) + report.total

        record = _epoch_record(epoch, params, src, adapt, holdout, tracker if mim_active else None,
                               {name: value / steps_per_epoch for name, value in sums.items()})
        metrics.epochs.append(record)
        if writer is not None:
            writer.append_epoch(record)
        logger.info('epoch %d | %s | src %.3f | tgt %.3f (transductive %.3f) | H(q) %s', epoch,
                    ' '.join('{}={:.4f}'.format(k, v) for k, v in sorted(record['loss'].items())),
                    record['source_accuracy'], record['target_accuracy'],
                    record['target_accuracy_transductive'],
                    'n/a' if record['marginal_entropy'] is None else '{:.4f}'.format(record['marginal_entropy']))

    final_eval = evaluate(params, holdout)
    last = metrics.epochs[-1]
    metrics.final = {
        'method': cfg.method,
        'row': cfg.row,
        'source_accuracy': last['source_accuracy'],
        'target_accuracy': final_eval.accuracy,
        'target_accuracy_transductive': last['target_accuracy_transductive'],
        'per_class_target_accuracy': final_eval.per_class_accuracy,
        'target_evaluated': final_eval.total,
        'loss': last['loss'],
        'steps': opt.step_count,
    }
    metrics.confusion = final_eval.confusion
    if writer is not None:
        writer.write_summary(metrics.final)
        writer.write_confusion(final_eval.confusion)
        writer.write_checkpoint(params, opt.step_count)
    return params, metrics


def _epoch_record(epoch, params, src, adapt, holdout, tracker, loss_means):
    source_eval = evaluate(params, src)
    target_eval = evaluate(params, holdout)
    transductive = evaluate(params, adapt) if adapt.labeled_mask.any() else None
    marginal = networks.predict_proba(params, adapt.flat()).mean(axis=0)
    return {
        'epoch': epoch,
        'loss': {name: value for name, value in loss_means.items() if name != 'total'},
        'total': loss_means['total'],
        'source_accuracy': source_eval.accuracy,
        'target_accuracy': target_eval.accuracy,
        'target_accuracy_transductive': transductive.accuracy if transductive else float('nan'),
        'per_class_target_accuracy': target_eval.per_class_accuracy.tolist(),
        'target_marginal': marginal.tolist(),
        'marginal_entropy': tracker.entropy() if tracker is not None else None,
        'diversity_active': tracker.diversity_active if tracker is not None else None,
    }


def _train_cell(job):
    cfg, source, target, record = job
    _, metrics = train(cfg, source, target)
    return dict(record, accuracy=100.0 * metrics.target_accuracy)


def run_cells(jobs, workers=1):
    """ Train (cfg, source, target, record) jobs, in worker processes when
        workers > 1; each record gains the target accuracy in points.
    """
    workers = max(1, int(workers))
    if workers == 1:
        return [_train_cell(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_train_cell, jobs))


def _tabulate(records, key, index, columns):
    frame = pd.DataFrame(records)
    table = frame.groupby([key, 'benchmark'])['accuracy'].mean().unstack('benchmark')
    table = table.reindex(index=index, columns=columns)
    table['Average'] = table.mean(axis=1)
    table.index.name = key
    return table


def ablation_suite(base_cfg, benchmarks, source, target, seeds=DEFAULT_SEEDS, rows=None, workers=1):
    """ Train every (row, benchmark, seed) cell and tabulate mean target
        accuracy in points, with an Average column across benchmarks.
        Inputs:
            base_cfg [TrainConfig]: loss weights of the full model
            benchmarks [list]: BenchmarkSpec per column
            source [DomainDataset], target [DomainDataset]: balanced pair
            seeds [tuple]: model / data seeds, results averaged
            rows [list]: subset of ABLATION_ROWS, all by default
            workers [int]: worker processes
        Output:
            table [pd.DataFrame]: rows x (benchmarks + Average)
    """
    rows = list(rows or ABLATION_ROWS)
    pairs = {spec.label: build_benchmark(source, target, spec) for spec in benchmarks}
    jobs = [(row_config(base_cfg, row, seed),) + pairs[label] + ({'row': row, 'benchmark': label, 'seed': seed},)
            for row in rows for label in pairs for seed in seeds]
    logger.info('Ablation: %d rows x %d benchmarks x %d seeds', len(rows), len(pairs), len(seeds))
    return _tabulate(run_cells(jobs, workers), 'row', rows, list(pairs))


def compare_methods(base_cfg, benchmarks, source, target, seeds=DEFAULT_SEEDS, methods=METHODS, workers=1):
    """ Mean target accuracy (points) of every method on every benchmark.
        Baselines run with base_cfg's optimizer and schedule and only the
        supervised term; instapbm keeps base_cfg's loss weights.
        Output:
            table [pd.DataFrame]: methods x (benchmarks + Average)
    """
    methods = list(methods)
    unknown = [method for method in methods if method not in METHODS]
    if unknown:
        raise ValidationError('Unknown methods {}; expected some of {}'.format(unknown, METHODS))
    pairs = {spec.label: build_benchmark(source, target, spec) for spec in benchmarks}
    jobs = []
    for method in methods:
        for label in pairs:
            for seed in seeds:
                cfg = replace(base_cfg, method=method, row=method, model_seed=int(seed), data_seed=int(seed))
                jobs.append((cfg,) + pairs[label] + ({'method': method, 'benchmark': label, 'seed': seed},))
    logger.info('Comparison: %d methods x %d benchmarks x %d seeds', len(methods), len(pairs), len(seeds))
    return _tabulate(run_cells(jobs, workers), 'method', methods, list(pairs))


def robustness_ordering(table, dm_margin=1.0, gain=5.0):
    """ Per benchmark column of a compare_methods table: whether each DM
        baseline stays within dm_margin points of source_only and whether
        instapbm beats source_only by at least gain points.
    """
    missing = [method for method in METHODS if method not in table.index]
    if missing:
        raise ValidationError('Comparison table lacks methods {}'.format(missing))
    baseline = table.loc['source_only']
    ordering = pd.DataFrame({
        'source_only': baseline,
        'dm_mmd_within_margin': table.loc['dm_mmd'] <= baseline + dm_margin,
        'dm_coral_within_margin': table.loc['dm_coral'] <= baseline + dm_margin,
        'instapbm_gain': table.loc['instapbm'] - baseline,
    })
    ordering['instapbm_ahead'] = ordering['instapbm_gain'] >= gain
    ordering.index.name = 'benchmark'
    return ordering


def ablation_ordering(table, tolerance=1.0, gain=5.0):
    """ Per benchmark column of an ablation table: whether the full model
        beats every single-component row, whether every row stays within
        tolerance points of Baseline, and the full model's gain over Baseline.
    """
    for row in ('Baseline', '+InstaPBM'):
        if row not in table.index:
            raise ValidationError('Ablation table lacks row {}'.format(row))
    baseline, full = table.loc['Baseline'], table.loc['+InstaPBM']
    singles = table.drop(index=['Baseline', '+InstaPBM'])
    ordering = pd.DataFrame({
        'baseline': baseline,
        'full_beats_singles': (singles <= full).all(axis=0),
        'singles_above_baseline': (singles >= baseline - tolerance).all(axis=0),
        'full_gain': full - baseline,
    })
    ordering['full_ahead'] = ordering['full_gain'] >= gain
    ordering.index.name = 'benchmark'
    return ordering


@dataclass
class GapCalibration:
    severity: float
    target_spec: GlyphDomainSpec
    accuracy: float
    in_band: bool
    history: pd.DataFrame


def calibrate_glyph_gap(source_spec, cfg=None, band=(0.6, 0.8), max_rounds=8):
    """ Bisect the target shift severity until source-only transfer accuracy
        lands inside band.
        Inputs:
            source_spec [GlyphDomainSpec]: source knobs; the target copies it
            cfg [TrainConfig]: training run to calibrate for (method forced to source_only)
            band [tuple]: accepted (low, high) target accuracy
            max_rounds [int]: bisection rounds
        Output:
            result [GapCalibration]: the accepted (or closest) severity and every round tried
    """
    low_acc, high_acc = band
    if not 0.0 <= low_acc < high_acc <= 1.0:
        raise ValidationError('Calibration band must satisfy 0 <= low < high <= 1, got {}'.format(band))
    cfg = replace(cfg or TrainConfig(), method='source_only', row=None)
    lower, upper = 0.0, 1.0
    source = generate_glyph_domain(source_spec, SOURCE)
    rounds, best = [], None
    for round_index in range(int(max_rounds)):
        severity = 0.5 * (lower + upper)
        target_spec = shifted_target_spec(source_spec, severity)
        _, metrics = train(cfg, source, generate_glyph_domain(target_spec, TARGET))
        accuracy = metrics.target_accuracy
        distance = max(low_acc - accuracy, accuracy - high_acc, 0.0)
        rounds.append({'round': round_index, 'severity': severity, 'accuracy': accuracy})
        logger.info('calibration round %d: severity %.4f -> source-only target accuracy %.3f',
                    round_index, severity, accuracy)
        if best is None or distance < best[0]:
            best = (distance, severity, target_spec, accuracy)
        if distance == 0.0:
            break
        if accuracy > high_acc:
            lower = severity
        else:
            upper = severity
    _, severity, target_spec, accuracy = best
    in_band = low_acc <= accuracy <= high_acc
    if not in_band:
        logger.warning('No severity reached the band %s; closest is %.4f at accuracy %.3f', band, severity, accuracy)
    return GapCalibration(severity, target_spec, accuracy, in_band, pd.DataFrame(rounds))


def final_mmd(params, src, tgt, limit=500):
    """ MMD^2 between g(X_S) and g(X_T) with median-heuristic bandwidths. """
    z_src = networks.features(params, Tensor(src.flat()[:limit]))
    z_tgt = networks.features(params, Tensor(tgt.flat()[:limit]))
    return losses.mmd_distance(z_src, z_tgt).item()


DEFAULT_DM_WEIGHTS = (0.0, 1.0, 2.0, 5.0, 10.0, 30.0, 100.0)


def default_probe_config():
    return TrainConfig(method='dm_mmd', epochs=100, batch_size=64, hidden=(64, 32), dm_ramp_steps=300,
                       loss=LossConfig(lambda_S=0.0, cpbm_kinds='ni', entropy_ceiling=0.5))


def lds_failure_probe(priors_src, priors_tgt, dm_weight_schedule=DEFAULT_DM_WEIGHTS, seeds=DEFAULT_SEEDS,
                      base_cfg=None, means=((-2.0, 0.0), (2.0, 0.0)), spread=0.6, n=1000, include_instapbm=True,
                      mmd_tol=0.01, source_floor=0.98):
    """ Train dm_mmd at escalating weights on a label-shifted blob pair and
        record the achieved MMD against target accuracy; the 1 - TV ceiling is
        the best any marginal-matched classifier can reach. A run is matched
        when MMD <= mmd_tol while source accuracy stays >= source_floor.
        Output:
            curve [pd.DataFrame]: method, dm_weight, seed, mmd, accuracies, ceiling, matched
    """
    base_cfg = base_cfg or default_probe_config()
    class_count = len(priors_src)
    ceiling = 1.0 - tv_distance(priors_src, priors_tgt)
    records = []
    for seed in seeds:
        src, tgt = generate_blob_pair(class_count, priors_src, priors_tgt, means, spread, n, seed)
        runs = [('dm_mmd', weight) for weight in dm_weight_schedule]
        if include_instapbm:
            runs.append(('instapbm', float('nan')))
        for method, weight in runs:
            changes = {'method': method, 'model_seed': seed, 'data_seed': seed}
            if method == 'dm_mmd':
                changes['dm_weight'] = float(weight)
            params, metrics = train(replace(base_cfg, **changes), src, tgt)
            mmd = final_mmd(params, src, tgt)
            source_accuracy = metrics.final['source_accuracy']
            records.append({'method': method, 'dm_weight': weight, 'seed': seed, 'mmd': mmd,
                            'source_accuracy': source_accuracy,
                            'target_accuracy': metrics.target_accuracy,
                            'ceiling': ceiling,
                            'matched': bool(method == 'dm_mmd' and mmd <= mmd_tol and source_accuracy >= source_floor)})
            logger.info('lds %s w=%s seed=%d: mmd %.4f src %.3f target %.3f (ceiling %.3f)', method, weight, seed,
                        mmd, source_accuracy, metrics.target_accuracy, ceiling)
    return pd.DataFrame(records)


def failure_verdict(curve, slack=0.05, instapbm_floor=0.88):
    """ Summarize a failure curve: matched dm_mmd runs must sit at or below
        ceiling + slack, and instapbm's mean target accuracy must exceed
        instapbm_floor.
    """
    matched = curve[curve['matched']]
    instapbm = curve.loc[curve['method'] == 'instapbm', 'target_accuracy']
    ceiling = float(curve['ceiling'].iloc[0])
    verdict = {
        'ceiling': ceiling,
        'matched_runs': int(len(matched)),
        'matched_seeds': sorted(int(seed) for seed in matched['seed'].unique()),
        'matched_max_target_accuracy': float(matched['target_accuracy'].max()) if len(matched) else None,
        'matched_below_ceiling': bool((matched['target_accuracy'] <= ceiling + slack).all()),
        'instapbm_mean_target_accuracy': float(instapbm.mean()) if len(instapbm) else None,
    }
    verdict['instapbm_above_floor'] = bool(len(instapbm) and instapbm.mean() > instapbm_floor)
    return verdict


def _weighted(t, weights):
    return reduce('sum', mul(t, Tensor(weights)))


def _primitive_cases(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    positive = np.abs(rng.normal(size=(3, 4))) + 0.5
    row = rng.normal(size=4)
    right = rng.normal(size=(4, 2))
    return {
        'add': (lambda x: _weighted(add(x, Tensor(b)), w), a),
        'add_broadcast': (lambda x: _weighted(add(Tensor(a), x), w), row),
        'sub': (lambda x: _weighted(sub(Tensor(b), x), w), a),
        'mul': (lambda x: _weighted(mul(x, Tensor(b)), w), a),
        'div_numerator': (lambda x: _weighted(div(x, Tensor(positive)), w), a),
        'div_denominator': (lambda x: _weighted(div(Tensor(b), x), w), positive),
        'exp': (lambda x: _weighted(exp(x), w), a),
        'log': (lambda x: _weighted(log(x), w), positive),
        'relu': (lambda x: _weighted(relu(x), w), a),
        'neg': (lambda x: _weighted(neg(x), w), a),
        'scale': (lambda x: _weighted(scale(x, 2.5), w), a),
        'matmul': (lambda x: _weighted(matmul(x, Tensor(right)), _leading(w, (3, 2))), a),
        'transpose': (lambda x: _weighted(transpose(x), w.T), a),
        'reshape': (lambda x: _weighted(reshape(x, (4, 3)), w.reshape(4, 3)), a),
        'take_rows': (lambda x: _weighted(take_rows(x, np.array([2, 0, 2])), w), a),
        'sum_axis': (lambda x: _weighted(reduce('sum', x, axis=1), w[:, 0]), a),
        'mean_axis': (lambda x: _weighted(reduce('mean', x, axis=0), w[0]), a),
        'max_axis': (lambda x: _weighted(reduce('max', x, axis=1), w[:, 0]), a),
        'log_softmax': (lambda x: _weighted(log_softmax(x), w), a),
        'softmax': (lambda x: _weighted(softmax(x), w), a),
        'square': (lambda x: _weighted(square(x), w), a),
        'clamp_max': (lambda x: _weighted(clamp_max(x, 0.3), w), a),
    }


def _leading(w, shape):
    return w.reshape(-1)[:int(np.prod(shape))].reshape(shape)


def _tiny_bundle(rng, loss_cfg, seed):
    images = rng.random((8, 4, 4))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    return build_batch_bundle(loss_cfg, images[:4], labels[:4], images[4:], seed)


def _loss_cases(rng, seed):
    K = 3
    logits = rng.normal(size=(5, K))
    labels = rng.integers(K, size=5)
    soft = rng.dirichlet(np.ones(K), size=5)
    noise = 0.3 * rng.normal(size=(5, K))
    partner = rng.permutation(5)
    mask = labels != labels[partner]
    skewed = MarginalTracker(K, q=[0.9, 0.05, 0.05])
    z_src = rng.normal(size=(5, 3))
    z_tgt = rng.normal(size=(4, 3)) + 0.5
    bandwidths = [0.5, 1.0, 2.0]
    rot_labels = rng.integers(4, size=5)
    flip_logits = Tensor(rng.normal(size=(5, 2)))
    flip_labels = rng.integers(2, size=5)

    cases = {
        'cross_entropy': (lambda x: losses.cross_entropy(x, labels), logits),
        'soft_cross_entropy': (lambda x: losses.soft_cross_entropy(x, soft), logits),
        'mim': (lambda x: losses.mim_loss(x, skewed, 0.95 * np.log(K), update_tracker=False), logits),
        'cpbm': (lambda x: losses.cpbm_loss(x, add(x, Tensor(noise)), x, take_rows(x, partner), mask, 0.1), logits),
        'mupbm': (lambda x: losses.mupbm_loss(x, soft), logits),
        'mupbm_reverse': (lambda x: losses.mupbm_loss(x, soft, 'prediction_to_target'), logits),
        'tpbm': (lambda x: losses.tpbm_loss({'rotate90': x, 'vflip': flip_logits},
                                            {'rotate90': rot_labels, 'vflip': flip_labels}),
                 rng.normal(size=(5, 4))),
        'mmd_rbf': (lambda x: losses.mmd_distance(x, Tensor(z_tgt), bandwidths), z_src),
        'mmd_linear': (lambda x: losses.mmd_distance(x, Tensor(z_tgt), kernel='linear'), z_src),
        'coral': (lambda x: losses.coral_distance(x, Tensor(z_tgt)), z_src),
    }

    # mix-up targets are detached target predictions, so that term is checked on its own
    total_cfg = LossConfig(lambda_U=0.0)
    params = networks.init_params([16, 6, K], seed, total_cfg.tpbm_tasks)
    bundle = _tiny_bundle(rng, total_cfg, seed)
    tracker = MarginalTracker(K, q=[0.8, 0.1, 0.1])

    def with_weight(holder, index, objective):
        def fn(x):
            original = holder[index]
            holder[index] = x
            try:
                return objective()
            finally:
                holder[index] = original
        return fn, holder[index].data.copy()

    cases['total_objective_head'] = with_weight(
        params.psi, 0, lambda: losses.total_objective(bundle, params, total_cfg, tracker, update_tracker=False)[0])
    cases['total_objective_features'] = with_weight(
        params.phi, 0, lambda: losses.total_objective(bundle, params, total_cfg, tracker, update_tracker=False)[0])
    cases['dm_coral_objective'] = with_weight(
        params.phi, 0, lambda: losses.dm_objective(bundle, params, 'coral', 1.0)[0])
    return cases


def gradient_suite(tol=1e-4, instances=20, seed=0):
    """ Finite-difference check of every primitive and loss term over random instances.
        Output:
            table [pd.DataFrame]: check, instances, max_relative_error, passed
    """
    worst = {}
    for instance in range(instances):
        rng = np.random.default_rng([seed, instance])
        cases = dict(_primitive_cases(rng))
        cases.update(_loss_cases(rng, derive_seed(seed, instance)))
        for name, (fn, point) in cases.items():
            report = grad_check(fn, point, tol=tol)
            worst[name] = max(worst.get(name, 0.0), report.max_relative_error)
    table = pd.DataFrame({'check': list(worst), 'instances': instances,
                          'max_relative_error': [worst[name] for name in worst]})
    table['passed'] = table['max_relative_error'] <= tol
    failed = table.loc[~table['passed'], 'check'].tolist()
    if failed:
        logger.warning('Gradient checks above tolerance %g: %s', tol, ', '.join(failed))
    else:
        logger.info('All %d gradient checks passed at tolerance %g', len(table), tol)
    return table
