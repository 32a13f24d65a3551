""" Realistic domain shift benchmark constructors.

    Each constructor consumes a balanced (source, target) pair and returns a
    shifted target; the source passes through untouched (ILDS only maps its
    labels to meta-classes).
"""
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from instapbm.data_synth import OUTLIER_LABEL, OUTLIER_STYLES, DomainDataset, outlier_pool
from instapbm.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

BENCHMARK_KINDS = ('conventional', 'LDS', 'ILDS', 'TwO')


@dataclass
class BenchmarkSpec:
    kind: str
    imbalance_factor: float = 1.0
    class_order: list = None
    meta_class_map: dict = None
    outlier_fraction: float = 0.0
    outlier_style: str = 'inverted_random'
    seed: int = 0
    name: str = None

    def __post_init__(self):
        if self.kind not in BENCHMARK_KINDS:
            raise ValidationError('Unknown benchmark kind {!r}; expected one of {}'.format(self.kind, BENCHMARK_KINDS))
        if not (math.isfinite(self.imbalance_factor) and self.imbalance_factor >= 1):
            raise ValidationError('imbalance_factor must be finite and >= 1, got {}'.format(self.imbalance_factor))
        if not 0 <= self.outlier_fraction < 1:
            raise ValidationError('outlier_fraction must lie in [0, 1), got {}'.format(self.outlier_fraction))
        if self.outlier_style not in OUTLIER_STYLES:
            raise ValidationError('Unknown outlier style {!r}'.format(self.outlier_style))
        if self.meta_class_map is not None:
            self.meta_class_map = {int(sub): int(meta) for sub, meta in self.meta_class_map.items()}
        if self.class_order is not None:
            self.class_order = [int(value) for value in self.class_order]

    @property
    def label(self):
        if self.name:
            return self.name
        if self.kind in ('LDS', 'ILDS'):
            return '{}(IF={:g})'.format(self.kind, self.imbalance_factor)
        if self.kind == 'TwO':
            return 'TwO(rho={:g})'.format(self.outlier_fraction)
        return self.kind


def long_tail_counts(n_max, imbalance_factor, positions):
    """ n_k = round(n_max * IF^(-k / (positions - 1))) for k = 0 .. positions - 1 """
    if positions == 1:
        return [int(n_max)]
    return [int(math.floor(n_max * imbalance_factor ** (-k / (positions - 1)) + 0.5)) for k in range(positions)]


def _order(spec, members, stream):
    members = sorted(int(member) for member in members)
    if spec.class_order is not None:
        order = [member for member in spec.class_order if member in members]
        if sorted(order) != members:
            raise ValidationError('class_order {} is not a permutation of {}'.format(spec.class_order, members))
        return order
    rng = np.random.default_rng([spec.seed, stream])
    return [members[i] for i in rng.permutation(len(members))]


def _benchmark_metadata(ds, spec, **extra):
    metadata = dict(ds.metadata)
    metadata['benchmark'] = dict(asdict(spec), **extra)
    return metadata


def resample_lds(target, spec):
    """ Long-tail the target label distribution.
        Inputs:
            target [DomainDataset]: balanced target
            spec [BenchmarkSpec]: kind LDS
        Output:
            shifted [DomainDataset]: sub-multiset of target
    """
    if spec.kind != 'LDS':
        raise ValidationError('resample_lds needs an LDS spec, got {}'.format(spec.kind))
    counts = target.counts()
    if len(set(counts.tolist())) != 1:
        raise ValidationError('LDS needs a balanced target, got counts {}'.format(counts.tolist()))
    n_max = int(counts[0])
    order = _order(spec, range(target.class_count), 0)
    wanted = long_tail_counts(n_max, spec.imbalance_factor, target.class_count)
    if wanted[-1] < 1:
        raise ValidationError('Tail class rounds to 0 samples (n_max={}, IF={}); use a larger n_max'.format(
            n_max, spec.imbalance_factor))

    rng = np.random.default_rng([spec.seed, 11])
    keep = []
    for cls, n_keep in zip(order, wanted):
        members = np.flatnonzero(target.labels == cls)
        keep.extend(rng.choice(members, size=n_keep, replace=False).tolist())
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    shifted = target.subset(keep)
    shifted.metadata = _benchmark_metadata(target, spec, class_order=order, histogram=shifted.counts().tolist())
    logger.info('LDS target counts %s', shifted.counts().tolist())
    return shifted


def default_meta_class_map(ds):
    """ Each sublabel maps to the label it was generated under. """
    if ds.sublabels is None:
        raise ValidationError('Dataset has no sublabels')
    labeled = ds.labeled_mask
    return {int(sub): int(label) for sub, label in zip(ds.sublabels[labeled], ds.labels[labeled])}


def _map_labels(ds, meta_map):
    missing = sorted({int(sub) for sub in ds.sublabels[ds.labeled_mask]} - set(meta_map))
    if missing:
        raise ValidationError('Sublabels {} are missing from the meta-class map'.format(missing))
    meta_count = max(meta_map.values()) + 1
    labels = np.array([meta_map[int(sub)] if label != OUTLIER_LABEL else OUTLIER_LABEL
                       for sub, label in zip(ds.sublabels, ds.labels)], dtype=np.int64)
    return labels, meta_count


def relabel_source(source, spec, meta_map=None):
    """ Source counterpart of ILDS: labels mapped to meta-classes, nothing resampled. """
    if source.sublabels is None:
        raise ValidationError('ILDS needs sublabels on the source')
    meta_map = meta_map or spec.meta_class_map or default_meta_class_map(source)
    labels, meta_count = _map_labels(source, meta_map)
    return DomainDataset(source.samples, labels, source.domain_role, meta_count, source.sublabels,
                         source.sample_ids, dict(source.metadata))


def build_ilds(target, spec, meta_map=None):
    """ Merge sub-classes into meta-classes and long-tail the sub-classes
        inside each meta-class with the LDS decay law.
    """
    if spec.kind != 'ILDS':
        raise ValidationError('build_ilds needs an ILDS spec, got {}'.format(spec.kind))
    if target.sublabels is None:
        raise ValidationError('ILDS needs sublabels on the target')
    meta_map = meta_map or spec.meta_class_map or default_meta_class_map(target)
    labels, meta_count = _map_labels(target, meta_map)

    rng = np.random.default_rng([spec.seed, 13])
    keep = [np.flatnonzero(target.labels == OUTLIER_LABEL)]
    sub_counts = {}
    for meta in range(meta_count):
        present = [sub for sub in np.unique(target.sublabels[target.labeled_mask]) if meta_map[int(sub)] == meta]
        if not present:
            continue
        order = _order(spec, present, 100 + meta)
        available = [int(np.sum(target.sublabels == sub)) for sub in order]
        wanted = long_tail_counts(min(available), spec.imbalance_factor, len(order))
        if wanted[-1] < 1:
            raise ValidationError('Tail sub-class of meta-class {} rounds to 0 samples'.format(meta))
        for sub, n_keep in zip(order, wanted):
            members = np.flatnonzero((target.sublabels == sub) & target.labeled_mask)
            keep.append(rng.choice(members, size=n_keep, replace=False))
            sub_counts[int(sub)] = n_keep
    keep = np.sort(np.concatenate(keep).astype(np.int64))
    shifted = DomainDataset(target.samples[keep], labels[keep], target.domain_role, meta_count,
                            target.sublabels[keep], target.sample_ids[keep], dict(target.metadata))
    shifted.metadata = _benchmark_metadata(target, spec, meta_class_map={str(k): v for k, v in meta_map.items()},
                                           sub_counts={str(k): v for k, v in sub_counts.items()},
                                           histogram=shifted.counts().tolist())
    logger.info('ILDS meta-class totals %s', shifted.counts().tolist())
    return shifted


def outliers_needed(target_size, fraction):
    return int(math.floor(fraction * target_size / (1 - fraction) + 0.5))


def inject_two(target, pool, spec):
    """ Append outliers (label -1) so they form a fraction rho of the result, then shuffle. """
    if spec.kind != 'TwO':
        raise ValidationError('inject_two needs a TwO spec, got {}'.format(spec.kind))
    if spec.outlier_fraction == 0:
        return target.subset(np.arange(len(target)))
    if tuple(pool.data.shape[1:]) != target.geometry:
        raise ShapeError('Outlier geometry {} does not match target {}'.format(pool.data.shape[1:], target.geometry))
    n_out = outliers_needed(len(target), spec.outlier_fraction)
    if pool.batch_size < n_out:
        raise ValidationError('Outlier pool holds {} images, {} needed'.format(pool.batch_size, n_out))

    rng = np.random.default_rng([spec.seed, 17])
    chosen = rng.choice(pool.batch_size, size=n_out, replace=False)
    first_id = int(target.sample_ids.max()) + 1 if len(target) else 0
    sublabels = None
    if target.sublabels is not None:
        sublabels = np.concatenate([target.sublabels, np.full(n_out, OUTLIER_LABEL)])
    combined = DomainDataset(np.concatenate([target.samples, pool.data[chosen]]),
                             np.concatenate([target.labels, np.full(n_out, OUTLIER_LABEL)]),
                             target.domain_role, target.class_count, sublabels,
                             np.concatenate([target.sample_ids, first_id + np.arange(n_out)]),
                             dict(target.metadata))
    shifted = combined.subset(rng.permutation(len(combined)))
    shifted.metadata = _benchmark_metadata(target, spec, outliers=n_out, histogram=shifted.counts().tolist())
    logger.info('TwO target: %d inliers + %d outliers', len(target), n_out)
    return shifted


@dataclass
class HistogramReport:
    counts: np.ndarray
    tv_to_uniform: float
    outliers: int

    def to_frame(self):
        total = self.counts.sum()
        return pd.DataFrame({'count': self.counts,
                             'fraction': self.counts / total if total else self.counts * 0.0})


def tv_distance(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(0.5 * np.abs(p / p.sum() - q / q.sum()).sum())


def label_histogram(ds):
    """ Per-class counts (outliers excluded) and TV distance to the uniform marginal. """
    counts = ds.counts()
    tv = tv_distance(counts, np.ones(ds.class_count)) if counts.sum() else 0.0
    return HistogramReport(counts, tv, int(np.sum(~ds.labeled_mask)))


def build_benchmark(source, target, spec, pool=None):
    """ Dispatch on spec.kind and return the (source, target) pair. """
    if spec.kind == 'conventional':
        return source, target
    if spec.kind == 'LDS':
        return source, resample_lds(target, spec)
    if spec.kind == 'ILDS':
        meta_map = spec.meta_class_map or default_meta_class_map(target)
        return relabel_source(source, spec, meta_map), build_ilds(target, spec, meta_map)
    if pool is None:
        if not target.is_image:
            raise ValidationError('TwO outliers are images; pass a pool for point datasets')
        height, width = target.geometry
        pool = outlier_pool(spec.outlier_style, max(1, outliers_needed(len(target), spec.outlier_fraction)),
                            spec.seed, height, width)
    return source, inject_two(target, pool, spec)


def benchmark_report(source, target, spec):
    src_hist, tgt_hist = label_histogram(source), label_histogram(target)
    return {
        'spec': asdict(spec),
        'source_histogram': src_hist.counts.tolist(),
        'target_histogram': tgt_hist.counts.tolist(),
        'target_outliers': tgt_hist.outliers,
        'source_tv_to_uniform': src_hist.tv_to_uniform,
        'target_tv_to_uniform': tgt_hist.tv_to_uniform,
        'source_target_tv': tv_distance(src_hist.counts, tgt_hist.counts),
    }


def write_benchmark_json(path, source, target, spec):
    """ benchmark.json: spec, achieved histograms and TV distances. """
    report = benchmark_report(source, target, spec)
    with open(path, 'w') as handle:
        json.dump(report, handle, indent=2, sort_keys=True)
    logger.info('Wrote %s (%s)', path, spec.label)
    return report
