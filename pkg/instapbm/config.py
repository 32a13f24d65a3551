""" JSON configuration loading: user keys overlay a defaults dict, unknown
    keys are rejected, and nested blocks are merged the same way.
"""
import json
import logging
import os
from dataclasses import asdict

from instapbm.data_synth import DEFAULT_SEVERITY, GlyphDomainSpec, severity_knobs
from instapbm.errors import InstaPBMError, ValidationError
from instapbm.losses import LossConfig
from instapbm.rds_bench import BenchmarkSpec
from instapbm.trainer_eval import DEFAULT_SEEDS, METHODS, TrainConfig, default_optimizer
from instapbm.transforms import SemanticPreservingRanges

logger = logging.getLogger(__name__)

TARGET_KNOBS = severity_knobs(DEFAULT_SEVERITY)
NESTED_TRAIN_BLOCKS = {
    'loss': lambda: asdict(LossConfig()),
    'optimizer': default_optimizer,
    'ranges': lambda: asdict(SemanticPreservingRanges()),
}


def parse_params(params, defaults, name='config'):
    """ Overlay user params on a defaults dict.
        Inputs:
            params [dict]: user input (may be None)
            defaults [dict]: every accepted key with its default
            name [str]: label used in error messages
        Outputs:
            resolved [dict]: new dict holding every default key
    """
    params = dict(params or {})
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ValidationError('Unknown {} keys: {}'.format(name, ', '.join(unknown)))
    resolved = dict(defaults)
    resolved.update(params)
    return resolved


def build(factory, params, name):
    """ Call factory(**params); type-wrong values surface as ValidationError. """
    try:
        return factory(**params)
    except InstaPBMError:
        raise
    except (TypeError, ValueError) as error:
        raise ValidationError('Invalid {} values: {}'.format(name, error))


def read_json(path):
    if not os.path.isfile(path):
        raise ValidationError('Config file {} does not exist'.format(path))
    with open(path) as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as error:
            raise ValidationError('Config file {} is not valid JSON: {}'.format(path, error))


def train_config_from_dict(params):
    defaults = asdict(TrainConfig())
    resolved = parse_params(params, defaults, 'train')
    for block, block_defaults in NESTED_TRAIN_BLOCKS.items():
        resolved[block] = parse_params((params or {}).get(block), block_defaults(), block)
    return build(TrainConfig, resolved, 'train')


def load_train_config(path):
    cfg = train_config_from_dict(read_json(path))
    logger.info('Loaded %s config from %s', cfg.method, path)
    return cfg


def default_glyph_specs(seed=0, **shared):
    """ Source / target knob settings of the default glyph pair. """
    source = GlyphDomainSpec(seed=seed, **shared)
    target = GlyphDomainSpec(seed=seed + 1, **dict(TARGET_KNOBS, **shared))
    return source, target


def glyph_specs_from_dict(params, seed=None):
    """ {'source': {...}, 'target': {...}} -> (GlyphDomainSpec, GlyphDomainSpec).
        An explicit seed sets the source seed and seed + 1 on the target.
    """
    params = parse_params(params, {'generator': 'glyph', 'source': {}, 'target': {}}, 'glyph spec')
    src_default, tgt_default = default_glyph_specs()
    source = parse_params(params['source'], asdict(src_default), 'source')
    target = parse_params(params['target'], asdict(tgt_default), 'target')
    if seed is not None:
        source['seed'], target['seed'] = int(seed), int(seed) + 1
    return build(GlyphDomainSpec, source, 'source'), build(GlyphDomainSpec, target, 'target')


def blob_params_from_dict(params, seed=None):
    defaults = {'generator': 'blob', 'K': 2, 'source_priors': [0.5, 0.5], 'target_priors': [0.7, 0.3],
                'means': [[-2.0, 0.0], [2.0, 0.0]], 'spread': 0.6, 'n': 1000, 'seed': 0}
    resolved = parse_params(params, defaults, 'blob spec')
    if seed is not None:
        resolved['seed'] = int(seed)
    resolved.pop('generator')
    return resolved


def benchmark_spec_from_dict(params):
    defaults = {key: value for key, value in asdict(BenchmarkSpec('conventional')).items()}
    return build(BenchmarkSpec, parse_params(params, defaults, 'benchmark'), 'benchmark')


def _seeds_and_workers(resolved, name):
    try:
        return tuple(int(seed) for seed in resolved['seeds']), int(resolved['workers'])
    except (TypeError, ValueError) as error:
        raise ValidationError('Invalid {} values: {}'.format(name, error))


def ablation_config_from_dict(params):
    """ {'train': ..., 'data': glyph spec, 'benchmarks': [...], 'seeds': [...],
        'rows': [...], 'workers': n}
    """
    defaults = {'train': {}, 'data': {}, 'benchmarks': [{'kind': 'LDS', 'imbalance_factor': 10.0}],
                'seeds': list(DEFAULT_SEEDS), 'rows': None, 'workers': 1}
    resolved = parse_params(params, defaults, 'ablation')
    seeds, workers = _seeds_and_workers(resolved, 'ablation')
    return {
        'train': train_config_from_dict(resolved['train']),
        'data': glyph_specs_from_dict(resolved['data']),
        'benchmarks': [benchmark_spec_from_dict(spec) for spec in resolved['benchmarks']],
        'seeds': seeds,
        'rows': resolved['rows'],
        'workers': workers,
    }


def comparison_config_from_dict(params):
    """ {'train': ..., 'data': glyph spec, 'benchmarks': [...], 'seeds': [...],
        'methods': [...], 'workers': n}
    """
    defaults = {'train': {}, 'data': {},
                'benchmarks': [{'kind': 'LDS', 'imbalance_factor': 10.0},
                               {'kind': 'ILDS', 'imbalance_factor': 10.0},
                               {'kind': 'TwO', 'outlier_fraction': 0.3}],
                'seeds': list(DEFAULT_SEEDS), 'methods': list(METHODS), 'workers': 1}
    resolved = parse_params(params, defaults, 'comparison')
    seeds, workers = _seeds_and_workers(resolved, 'comparison')
    return {
        'train': train_config_from_dict(resolved['train']),
        'data': glyph_specs_from_dict(resolved['data']),
        'benchmarks': [benchmark_spec_from_dict(spec) for spec in resolved['benchmarks']],
        'seeds': seeds,
        'methods': list(resolved['methods']),
        'workers': workers,
    }
