import json

import pytest

from instapbm import config, data_synth
from instapbm.errors import ValidationError


def test_parse_params_overlays_defaults():
    resolved = config.parse_params({'b': 3}, {'a': 1, 'b': 2})
    assert resolved == {'a': 1, 'b': 3}
    assert config.parse_params(None, {'a': 1}) == {'a': 1}


def test_parse_params_rejects_unknown_keys():
    with pytest.raises(ValidationError) as info:
        config.parse_params({'c': 1, 'a': 2}, {'a': 1}, 'train')
    assert 'train' in str(info.value) and 'c' in str(info.value)


def test_train_config_merges_nested_blocks():
    cfg = config.train_config_from_dict({'method': 'dm_coral', 'loss': {'lambda_con': 0.2},
                                         'optimizer': {'kind': 'sgd_momentum'}})
    assert cfg.method == 'dm_coral'
    assert cfg.loss.lambda_con == 0.2 and cfg.loss.lambda_M == 1.0
    assert cfg.optimizer['kind'] == 'sgd_momentum' and cfg.optimizer['lr'] == 1e-3


def test_train_config_rejects_unknown_nested_keys():
    with pytest.raises(ValidationError):
        config.train_config_from_dict({'loss': {'lambda_X': 1.0}})


def test_load_train_config_errors(tmp_path):
    with pytest.raises(ValidationError):
        config.load_train_config(str(tmp_path / 'missing.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{"epochs": ')
    with pytest.raises(ValidationError):
        config.load_train_config(str(broken))


def test_load_train_config(tmp_path):
    path = tmp_path / 'train.json'
    path.write_text(json.dumps({'epochs': 3, 'hidden': [12, 6]}))
    cfg = config.load_train_config(str(path))
    assert cfg.epochs == 3 and cfg.hidden == (12, 6)


def test_glyph_specs_seed_override():
    source, target = config.glyph_specs_from_dict({'target': {'invert': True}}, seed=10)
    assert source.seed == 10 and target.seed == 11
    assert target.invert and target.background == config.TARGET_KNOBS['background']
    assert source.background == 0.0


def test_blob_and_benchmark_specs():
    blob = config.blob_params_from_dict({'generator': 'blob', 'n': 50}, seed=4)
    assert blob['n'] == 50 and blob['seed'] == 4 and 'generator' not in blob
    spec = config.benchmark_spec_from_dict({'kind': 'LDS', 'imbalance_factor': 5})
    assert spec.label == 'LDS(IF=5)'
    with pytest.raises(ValidationError):
        config.benchmark_spec_from_dict({'kind': 'LDS', 'factor': 5})


def test_ablation_config_defaults():
    resolved = config.ablation_config_from_dict({'seeds': [1, 2], 'train': {'epochs': 2}})
    assert resolved['seeds'] == (1, 2)
    assert resolved['train'].epochs == 2
    assert [spec.label for spec in resolved['benchmarks']] == ['LDS(IF=10)']
    assert resolved['rows'] is None and resolved['workers'] == 1


@pytest.mark.parametrize('params', [{'epochs': '3'}, {'hidden': ['wide']}, {'loss': {'lambda_M': 'high'}},
                                    {'head_bias_init': 'collapsed'}])
def test_type_wrong_values_are_validation_errors(params):
    with pytest.raises(ValidationError):
        config.train_config_from_dict(params)


def test_type_wrong_glyph_and_ablation_values():
    with pytest.raises(ValidationError):
        config.glyph_specs_from_dict({'source': {'noise': 'loud'}})
    with pytest.raises(ValidationError):
        config.ablation_config_from_dict({'seeds': ['one']})


def test_default_target_is_the_default_severity():
    _, target = config.default_glyph_specs()
    for name, value in data_synth.severity_knobs(data_synth.DEFAULT_SEVERITY).items():
        assert getattr(target, name) == pytest.approx(value)
    assert target.offset > 0


def test_comparison_config_defaults():
    resolved = config.comparison_config_from_dict({'methods': ['source_only', 'instapbm'], 'workers': 2})
    assert [spec.label for spec in resolved['benchmarks']] == ['LDS(IF=10)', 'ILDS(IF=10)', 'TwO(rho=0.3)']
    assert resolved['methods'] == ['source_only', 'instapbm'] and resolved['workers'] == 2
    assert resolved['seeds'] == (17, 29, 41)
