import json
import os

import pytest
from click.testing import CliRunner

from main import cli


@pytest.fixture
def runner():
    return CliRunner()


def envelope(result):
    return json.loads(result.output[result.output.index('{\n'):])


@pytest.fixture
def generated(tmp_path, runner):
    spec = tmp_path / 'spec.json'
    spec.write_text(json.dumps({'source': {'samples_per_class': 10}, 'target': {'samples_per_class': 10}}))
    out = str(tmp_path / 'data')
    result = runner.invoke(cli, ['generate', '--spec', str(spec), '--out', out, '--seed', '3'])
    assert result.exit_code == 0, result.output
    return out


def test_generate_writes_both_domains(generated):
    for role in ('source', 'target'):
        assert os.path.isfile(os.path.join(generated, role, 'meta.json'))
        assert os.path.isfile(os.path.join(generated, role, 'images.f32le'))


def test_bench_reports_histograms(tmp_path, runner, generated):
    out = str(tmp_path / 'lds')
    result = runner.invoke(cli, ['bench', '--kind', 'lds', '--in', generated, '--out', out, '--if', '5'])
    assert result.exit_code == 0, result.output
    body = envelope(result)
    assert body['status'] == 'success' and body['message'] == 'LDS(IF=5)'
    assert sorted(body['payload'][0]['target_histogram'], reverse=True) == [10, 6, 3, 2]
    assert os.path.isfile(os.path.join(out, 'benchmark.json'))
    histogram = open(os.path.join(out, 'target_histogram.csv')).read().splitlines()
    assert histogram[0] == 'class,count,fraction' and len(histogram) == 5


def test_train_and_eval(tmp_path, runner, generated):
    config_path = tmp_path / 'train.json'
    config_path.write_text(json.dumps({'epochs': 1, 'batch_size': 8, 'hidden': [8, 4]}))
    run = str(tmp_path / 'run')
    result = runner.invoke(cli, ['train', '--config', str(config_path), '--src', os.path.join(generated, 'source'),
                                 '--tgt', os.path.join(generated, 'target'), '--out', run])
    assert result.exit_code == 0, result.output
    assert envelope(result)['payload'][0]['method'] == 'instapbm'

    result = runner.invoke(cli, ['eval', '--checkpoint', os.path.join(run, 'checkpoint.bin'),
                                 '--data', os.path.join(generated, 'target')])
    assert result.exit_code == 0, result.output
    payload = envelope(result)['payload'][0]
    assert payload['evaluated'] == 40 and 0.0 <= payload['accuracy'] <= 1.0


def test_bad_config_exits_with_validation_code(tmp_path, runner, generated):
    config_path = tmp_path / 'train.json'
    config_path.write_text(json.dumps({'epochs': 1, 'learning_rate': 0.1}))
    result = runner.invoke(cli, ['train', '--config', str(config_path), '--src', os.path.join(generated, 'source'),
                                 '--tgt', os.path.join(generated, 'target'), '--out', str(tmp_path / 'run')])
    assert result.exit_code == 1
    body = envelope(result)
    assert body['hasErrors'] is True and body['errorType'] == 'ValidationError'
    assert 'learning_rate' in body['message']


def test_eval_missing_checkpoint(tmp_path, runner, generated):
    result = runner.invoke(cli, ['eval', '--checkpoint', str(tmp_path / 'none.bin'),
                                 '--data', os.path.join(generated, 'target')])
    assert result.exit_code == 1


def test_gradcheck_command(runner):
    result = runner.invoke(cli, ['gradcheck', '--instances', '1'])
    assert result.exit_code == 0, result.output
    body = envelope(result)
    assert body['length'] == len(body['payload']) and all(row['passed'] for row in body['payload'])


def test_type_wrong_config_keeps_the_envelope(tmp_path, runner, generated):
    config_path = tmp_path / 'train.json'
    config_path.write_text(json.dumps({'epochs': '3'}))
    result = runner.invoke(cli, ['train', '--config', str(config_path), '--src', os.path.join(generated, 'source'),
                                 '--tgt', os.path.join(generated, 'target'), '--out', str(tmp_path / 'run')])
    assert result.exit_code == 1
    assert envelope(result)['errorType'] == 'ValidationError'


def test_malformed_meta_keeps_the_envelope(tmp_path, runner, generated):
    meta_path = os.path.join(generated, 'target', 'meta.json')
    meta = json.load(open(meta_path))
    del meta['geometry']
    with open(meta_path, 'w') as handle:
        json.dump(meta, handle)
    result = runner.invoke(cli, ['bench', '--kind', 'lds', '--in', generated, '--out', str(tmp_path / 'lds')])
    assert result.exit_code == 1
    assert envelope(result)['errorType'] == 'ValidationError'


def test_compare_writes_table_and_ordering(tmp_path, runner):
    config_path = tmp_path / 'compare.json'
    config_path.write_text(json.dumps({
        'train': {'epochs': 1, 'batch_size': 8, 'hidden': [8, 4]},
        'data': {'source': {'samples_per_class': 10}, 'target': {'samples_per_class': 10}},
        'benchmarks': [{'kind': 'conventional'}],
        'seeds': [1],
    }))
    out = str(tmp_path / 'compare')
    result = runner.invoke(cli, ['compare', '--config', str(config_path), '--out', out])
    assert result.exit_code == 0, result.output
    payload = envelope(result)['payload']
    assert [row['method'] for row in payload[:4]] == ['source_only', 'dm_mmd', 'dm_coral', 'instapbm']
    assert payload[4]['ordering'][0]['benchmark'] == 'conventional'
    assert os.path.isfile(os.path.join(out, 'comparison.csv')) and os.path.isfile(os.path.join(out, 'ordering.csv'))


def test_calibrate_writes_the_chosen_pair(tmp_path, runner):
    spec = tmp_path / 'spec.json'
    spec.write_text(json.dumps({'source': {'samples_per_class': 10}}))
    config_path = tmp_path / 'train.json'
    config_path.write_text(json.dumps({'epochs': 1, 'batch_size': 8, 'hidden': [8, 4]}))
    out = str(tmp_path / 'calibrated')
    result = runner.invoke(cli, ['calibrate', '--spec', str(spec), '--config', str(config_path), '--out', out,
                                 '--rounds', '2'])
    assert result.exit_code == 0, result.output
    payload = envelope(result)['payload'][0]
    assert payload['severity'] in (0.25, 0.5, 0.75)
    assert payload['target']['offset'] == pytest.approx(3.0 * payload['severity'])
    assert len(open(os.path.join(out, 'calibration.csv')).read().splitlines()) in (2, 3)
    assert os.path.isfile(os.path.join(out, 'target', 'meta.json'))
