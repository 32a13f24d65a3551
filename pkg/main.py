import functools
import logging
import os
from dataclasses import replace

import click

from instapbm import config, data_synth, networks, rds_bench, trainer_eval
from instapbm.errors import NumericalError, ValidationError
from payload_wrapper import PayloadWrapper

EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _report(fn):
    """ Print the command result as a JSON envelope and map errors to exit codes. """
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        pw = PayloadWrapper()
        try:
            payload, message = fn(*args, **kwargs)
        except ValidationError as error:
            click.echo(pw.dumps(pw.error(error, type(error).__name__)))
            raise SystemExit(EXIT_VALIDATION)
        except NumericalError as error:
            click.echo(pw.dumps(pw.error(error, type(error).__name__)))
            raise SystemExit(EXIT_NUMERICAL)
        click.echo(pw.dumps(pw.success(payload, message)))
    return wrapper


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Log per-step details.')
def cli(verbose):
    """ Desk-scale lab for predictive behavior matching under realistic domain shift. """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')


@cli.command()
@click.option('--spec', 'spec_path', type=click.Path(), default=None,
              help='JSON generator spec (glyph or blob); default glyph pair if omitted.')
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--seed', type=int, default=None)
@_report
def generate(spec_path, out_dir, seed):
    """ Generate a (source, target) dataset pair. """
    params = config.read_json(spec_path) if spec_path else {}
    if params.get('generator', 'glyph') == 'blob':
        blob = config.blob_params_from_dict(params, seed)
        source, target = data_synth.generate_blob_pair(**blob)
    else:
        source, target = data_synth.generate_glyph_pair(*config.glyph_specs_from_dict(params, seed))
    data_synth.save_dataset(source, os.path.join(out_dir, data_synth.SOURCE))
    data_synth.save_dataset(target, os.path.join(out_dir, data_synth.TARGET))
    return {'source': len(source), 'target': len(target), 'class_count': source.class_count}, \
        'Wrote {}'.format(out_dir)


@cli.command()
@click.option('--kind', type=click.Choice(['lds', 'ilds', 'two', 'conventional']), required=True)
@click.option('--in', 'in_dir', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--if', 'imbalance_factor', type=float, default=1.0)
@click.option('--rho', 'outlier_fraction', type=float, default=0.0)
@click.option('--style', 'outlier_style', type=click.Choice(data_synth.OUTLIER_STYLES), default='inverted_random')
@click.option('--seed', type=int, default=0)
@_report
def bench(kind, in_dir, out_dir, imbalance_factor, outlier_fraction, outlier_style, seed):
    """ Build an LDS / ILDS / TwO benchmark from a generated pair. """
    kinds = {'lds': 'LDS', 'ilds': 'ILDS', 'two': 'TwO', 'conventional': 'conventional'}
    spec = rds_bench.BenchmarkSpec(kinds[kind], imbalance_factor=imbalance_factor,
                                   outlier_fraction=outlier_fraction, outlier_style=outlier_style, seed=seed)
    source = data_synth.load_dataset(os.path.join(in_dir, data_synth.SOURCE))
    target = data_synth.load_dataset(os.path.join(in_dir, data_synth.TARGET))
    source, target = rds_bench.build_benchmark(source, target, spec)
    data_synth.save_dataset(source, os.path.join(out_dir, data_synth.SOURCE))
    data_synth.save_dataset(target, os.path.join(out_dir, data_synth.TARGET))
    report = rds_bench.write_benchmark_json(os.path.join(out_dir, 'benchmark.json'), source, target, spec)
    histogram = rds_bench.label_histogram(target).to_frame()
    histogram.to_csv(os.path.join(out_dir, 'target_histogram.csv'), index_label='class')
    return report, spec.label


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path())
@click.option('--src', 'src_dir', required=True, type=click.Path())
@click.option('--tgt', 'tgt_dir', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@_report
def train(config_path, src_dir, tgt_dir, out_dir):
    """ Train one method and write the run directory. """
    cfg = config.load_train_config(config_path)
    source = data_synth.load_dataset(src_dir)
    target = data_synth.load_dataset(tgt_dir)
    _, metrics = trainer_eval.train(cfg, source, target, trainer_eval.RunWriter(out_dir))
    return metrics.final, 'Run written to {}'.format(out_dir)


@cli.command('eval')
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path())
@click.option('--data', 'data_dir', required=True, type=click.Path())
@_report
def evaluate(checkpoint_path, data_dir):
    """ Accuracy of a checkpoint on a dataset directory. """
    if not os.path.isfile(checkpoint_path):
        raise ValidationError('Checkpoint {} does not exist'.format(checkpoint_path))
    params, header = networks.load_checkpoint(checkpoint_path)
    result = trainer_eval.evaluate(params, data_synth.load_dataset(data_dir))
    return {'accuracy': result.accuracy, 'per_class_accuracy': result.per_class_accuracy,
            'confusion': result.confusion, 'evaluated': result.total, 'step': header['step']}, data_dir


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@_report
def ablate(config_path, out_dir):
    """ Component ablation table across benchmarks. """
    params = config.ablation_config_from_dict(config.read_json(config_path))
    source, target = data_synth.generate_glyph_pair(*params['data'])
    table = trainer_eval.ablation_suite(params['train'], params['benchmarks'], source, target,
                                        params['seeds'], params['rows'], params['workers'])
    os.makedirs(out_dir, exist_ok=True)
    table.to_csv(os.path.join(out_dir, 'ablation.csv'), float_format='%.2f')
    records = table.reset_index().to_dict(orient='records')
    if {'Baseline', '+InstaPBM'} <= set(table.index):
        ordering = trainer_eval.ablation_ordering(table)
        ordering.to_csv(os.path.join(out_dir, 'ordering.csv'), float_format='%.2f')
        records.append({'ordering': ordering.reset_index().to_dict(orient='records')})
    return records, 'Ablation written to {}'.format(out_dir)


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path())
@click.option('--out', 'out_dir', required=True, type=click.Path())
@_report
def compare(config_path, out_dir):
    """ Method comparison table across RDS benchmarks, with the robustness ordering. """
    params = config.comparison_config_from_dict(config.read_json(config_path))
    source, target = data_synth.generate_glyph_pair(*params['data'])
    table = trainer_eval.compare_methods(params['train'], params['benchmarks'], source, target,
                                         params['seeds'], params['methods'], params['workers'])
    os.makedirs(out_dir, exist_ok=True)
    table.to_csv(os.path.join(out_dir, 'comparison.csv'), float_format='%.2f')
    records = table.reset_index().to_dict(orient='records')
    if set(trainer_eval.METHODS) <= set(table.index):
        ordering = trainer_eval.robustness_ordering(table)
        ordering.to_csv(os.path.join(out_dir, 'ordering.csv'), float_format='%.2f')
        records.append({'ordering': ordering.reset_index().to_dict(orient='records')})
    return records, 'Comparison written to {}'.format(out_dir)


@cli.command()
@click.option('--spec', 'spec_path', type=click.Path(), default=None,
              help='JSON glyph spec; its source block is calibrated against.')
@click.option('--config', 'config_path', type=click.Path(), default=None,
              help='Training config the gap is calibrated for; defaults to TrainConfig.')
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--seed', type=int, default=None)
@click.option('--band', default='0.6,0.8', help='Accepted source-only target accuracy range.')
@click.option('--rounds', type=int, default=8)
@_report
def calibrate(spec_path, config_path, out_dir, seed, band, rounds):
    """ Pick the target shift severity that puts source-only accuracy inside the band. """
    source_spec, _ = config.glyph_specs_from_dict(config.read_json(spec_path) if spec_path else {}, seed)
    cfg = config.load_train_config(config_path) if config_path else None
    bounds = _floats(band)
    if len(bounds) != 2:
        raise ValidationError('--band needs two numbers, got {!r}'.format(band))
    result = trainer_eval.calibrate_glyph_gap(source_spec, cfg, tuple(bounds), rounds)
    source, target = data_synth.generate_glyph_pair(source_spec, result.target_spec)
    data_synth.save_dataset(source, os.path.join(out_dir, data_synth.SOURCE))
    data_synth.save_dataset(target, os.path.join(out_dir, data_synth.TARGET))
    result.history.to_csv(os.path.join(out_dir, 'calibration.csv'), index=False)
    payload = {'severity': result.severity, 'accuracy': result.accuracy, 'in_band': result.in_band,
               'target': data_synth.severity_knobs(result.severity)}
    return payload, 'Calibrated pair written to {}'.format(out_dir)


@cli.command()
@click.option('--tol', type=float, default=1e-4)
@click.option('--instances', type=int, default=20)
@click.option('--seed', type=int, default=0)
@_report
def gradcheck(tol, instances, seed):
    """ Finite-difference check of every primitive and loss term. """
    table = trainer_eval.gradient_suite(tol, instances, seed)
    failed = table.loc[~table['passed'], 'check'].tolist()
    if failed:
        raise NumericalError('Gradient checks above tolerance {}: {}'.format(tol, ', '.join(failed)))
    return table.to_dict(orient='records'), '{} checks passed'.format(len(table))


@cli.command('probe-lds')
@click.option('--out', 'out_dir', required=True, type=click.Path())
@click.option('--source-priors', default='0.5,0.5')
@click.option('--target-priors', default='0.7,0.3')
@click.option('--weights', default='0,1,2,5,10,30,100', help='Comma separated dm_weight schedule.')
@click.option('--seeds', default='17,29,41')
@click.option('--epochs', type=int, default=None)
@click.option('--ramp', 'ramp_steps', type=int, default=None, help='dm_weight warm-up steps.')
@_report
def probe_lds(out_dir, source_priors, target_priors, weights, seeds, epochs, ramp_steps):
    """ Accuracy of MMD matching under pure label shift against the 1 - TV ceiling. """
    base_cfg = trainer_eval.default_probe_config()
    if epochs is not None:
        base_cfg = replace(base_cfg, epochs=epochs)
    if ramp_steps is not None:
        base_cfg = replace(base_cfg, dm_ramp_steps=ramp_steps)
    curve = trainer_eval.lds_failure_probe(_floats(source_priors), _floats(target_priors), _floats(weights),
                                           tuple(int(seed) for seed in _floats(seeds)), base_cfg)
    os.makedirs(out_dir, exist_ok=True)
    curve.to_csv(os.path.join(out_dir, 'curve.csv'), index=False)
    verdict = trainer_eval.failure_verdict(curve)
    message = 'Curve written to {}: {} matched dm_mmd runs, max target accuracy {} vs ceiling {:.2f}'.format(
        out_dir, verdict['matched_runs'], verdict['matched_max_target_accuracy'], verdict['ceiling'])
    return curve.to_dict(orient='records') + [{'verdict': verdict}], message


def _floats(text):
    try:
        return [float(value) for value in text.split(',') if value.strip()]
    except ValueError:
        raise ValidationError('Expected comma separated numbers, got {!r}'.format(text))


if __name__ == '__main__':
    cli()
