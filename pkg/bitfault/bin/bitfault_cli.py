#!/usr/bin/env python3
"""
Command line front end for bit error robustness experiments: train, evaluate, attack, bound and plot-data

Bit error rates are given in percent on the command line (`--p 1` means 1%). Exit codes: 0 on success, 2 for invalid
    options, configs or input files, 3 when a computation produced non-finite values.
"""

import argparse
import functools
import json
import logging
import os
import sys
import typing as ty

from bitfault import (
    attack,
    biterr,
    config,
    datasets,
    evaluate,
    exceptions,
    network,
    quant,
    storage,
    training,
)
from bitfault.const import ATTACK_EXAMPLES, DEFAULT_CHIPS, EVAL_EXAMPLES, FAST_CHIPS

logger = logging.getLogger(__name__)
logging.basicConfig(level=logging.INFO, format='%(message)s')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def suppress_broken_pipe_msg(f):
    """
    When the output is piped into another program (eg head) that closes the pipe early, stop quietly instead of
        printing a traceback
    """
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except BrokenPipeError:  # pragma: no cover
            devnull = os.open(os.devnull, os.O_WRONLY)
            os.dup2(devnull, sys.stdout.fileno())
            sys.exit(1)
    return wrapper


def _percent(values: ty.Optional[ty.Sequence[float]]) -> ty.Optional[ty.List[float]]:
    return [v / 100 for v in values] if values is not None else None


def _output_prefix(path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return path


def _quantized(q: ty.Optional[quant.QuantizedParams], path: str) -> quant.QuantizedParams:
    if q is None:
        raise exceptions.ConfigurationException('Checkpoint {} holds no quantized weights'.format(path))
    return q


def _test_data(metadata: dict, data_path: str = None, synthetic: bool = False) -> datasets.Dataset:
    """The test split the checkpoint was trained against, unless overridden"""
    section = dict((metadata.get('config') or {}).get('data') or {})
    if synthetic:
        section['source'] = 'synthetic'
    if data_path:
        section.update(source='mnist', path=data_path)
    section.pop('train_examples', None)
    _, test = config.DataSpec(**section).load()
    return test


def _attack_examples(metadata: dict) -> int:
    return ((metadata.get('config') or {}).get('data') or {}).get('attack_examples', ATTACK_EXAMPLES)


######
# Subcommands
def cmd_train(args) -> int:
    spec = config.load_config(args.config)
    spec = config.apply_overrides(
        spec, seed=args.seed, out_dir=args.out, regime=args.regime, p=args.p / 100 if args.p is not None else None,
        epochs=args.epochs, epsilon=args.epsilon, train_examples=args.train_examples, data_path=args.data)
    train, test = spec.data.load()

    architecture = dict(spec.architecture)
    channels, size = train.images.shape[1], train.images.shape[2]
    if architecture.get('name', 'simplenet') == 'simplenet':
        architecture.setdefault('in_channels', channels)
        architecture.setdefault('input_size', size)
    else:
        architecture.setdefault('in_shape', list(train.images.shape[1:]))
    architecture.setdefault('seed', spec.seed)
    net = network.build(architecture)

    logger.info('Training {} ({} regime, {} parameters) on {} examples'.format(
        spec.name, spec.train.regime, net.n_weights, len(train)))
    net, history = training.train(net, train, spec.train)

    params = net.parameters()
    spec.train.clip.project(params)
    q = quant.quantize(params, spec.train.quant) if spec.train.quant is not None else None
    te = evaluate.test_error(net, q, test)
    logger.info('Clean test error: {:.2f}%'.format(te * 100))

    os.makedirs(spec.out_dir, exist_ok=True)
    prefix = os.path.join(spec.out_dir, spec.name)
    storage.save_checkpoint(prefix, net, q, metadata={'config': spec.to_dict(), 'te': te,
                                                      'gate_step': history.gate_step()})
    history.to_csv(prefix + '.history.csv')
    logger.info('Checkpoint written to: {}.json'.format(prefix))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    net, q, metadata = storage.load_checkpoint(args.checkpoint)
    q = _quantized(q, args.checkpoint)
    test = _test_data(metadata, args.data, args.synthetic)
    data = test.subset(min(args.examples, len(test)))
    n_chips = FAST_CHIPS if args.fast else args.chips
    chips = biterr.make_chips(n_chips, seed=args.seed)

    model = args.name or os.path.basename(storage.checkpoint_paths(args.checkpoint)[0])[:-len('.json')]
    report = evaluate.EvalReport(model, evaluate.test_error(net, q, data), n=len(data), l=n_chips, delta=args.delta)
    logger.info('Clean test error: {:.2f}% on {} examples'.format(report.te * 100, len(data)))

    if args.profiled:
        if args.offsets < 1:
            raise exceptions.ConfigurationException('--offsets must be at least 1')
        pmap = storage.load_profiled_map(args.profiled)
        offsets = [i * (pmap.cells // args.offsets) for i in range(args.offsets)]
        report.profiled = evaluate.evaluate_profiled(net, q, pmap, offsets, data, seed=args.seed,
                                                     threads=args.threads)
        logger.info('RTE under profiled map {} (mean rate {:.3f}%): {:.2f} +- {:.2f}%'.format(
            args.profiled, pmap.mean_rate() * 100, report.profiled.mean * 100, report.profiled.std * 100))
    if args.p or not args.profiled:
        ps = _percent(args.p) or ((metadata.get('config') or {}).get('eval') or {}).get('ps') or [0.0]
        report.rte = evaluate.rte_curve(net, q, chips, ps, data, target=args.target, threads=args.threads)

    if args.confidence is not None:
        clean = evaluate.confidence_stats(net, q, data)
        spec = biterr.ErrorSpec(target='weights', p=args.confidence / 100, chip=chips[0])
        perturbed = evaluate.confidence_stats(net, q, data, spec=spec)
        report.confidence = {'clean': clean['mean'], 'perturbed': perturbed['mean'], 'p': args.confidence / 100}

    storage.save_report(_output_prefix(args.out), [report], evaluate.REPORT_FIELDS)
    logger.info('Report written to: {}.json and {}.csv'.format(args.out, args.out))
    return EXIT_OK


def cmd_attack(args) -> int:
    net, q, metadata = storage.load_checkpoint(args.checkpoint)
    q = _quantized(q, args.checkpoint)
    test = _test_data(metadata, args.data, args.synthetic)
    attack_set, eval_set = datasets.attack_eval_split(test, _attack_examples(metadata), EVAL_EXAMPLES)

    if args.replay:
        result, recorded = storage.load_attack_result(args.replay, q)
        error = evaluate.test_error(net, result.perturbed, eval_set)
        print(json.dumps({'error': error, 'recorded': recorded.get('worst_error'), 'flips': len(result.flips)},
                         sort_keys=True))
        return EXIT_OK

    if args.restarts < 1:
        raise exceptions.ConfigurationException('--restarts must be at least 1')
    base = attack.AttackConfig(epsilon=args.epsilon, iterations=args.iterations)
    restarts = attack.make_restarts(args.restarts, args.epsilon, net.num_classes, seed=args.seed, base=base)
    report = evaluate.evaluate_adversarial(net, q, args.epsilon, restarts, attack_set, eval_set, seed=args.seed,
                                           threads=args.threads)
    te = evaluate.test_error(net, q, eval_set)
    storage.save_attack_result(_output_prefix(args.out), report.worst, extra={
        'epsilon': args.epsilon,
        'te': te,
        'worst_error': report.worst_error,
        'restarts': report.table,
    })
    logger.info('Clean TE {:.2f}%, worst RTE {:.2f}% ({} flips); flips written to: {}'.format(
        te * 100, report.worst_error * 100, len(report.worst.flips), args.out))
    return EXIT_OK


@suppress_broken_pipe_msg
def cmd_bound(args) -> int:
    print(repr(evaluate.bound_excess(args.n, args.l, args.delta)))
    return EXIT_OK


def cmd_plot_data(args) -> int:
    chips = biterr.make_chips(args.chips, seed=args.seed)
    ps = _percent(args.p)
    curves = {}
    for path in args.checkpoints:
        net, q, metadata = storage.load_checkpoint(path)
        q = _quantized(q, path)
        test = _test_data(metadata, args.data, args.synthetic)
        data = test.subset(min(args.examples, len(test)))
        model = os.path.basename(storage.checkpoint_paths(path)[0])[:-len('.json')]
        curves[model] = evaluate.rte_curve(net, q, chips, ps, data, threads=args.threads)
    storage.write_rows(_output_prefix(args.out), evaluate.REPORT_FIELDS, evaluate.plot_rows(curves))
    logger.info('RTE series for {} models written to: {}'.format(len(curves), args.out))
    return EXIT_OK


def _add_data_options(parser: argparse.ArgumentParser):
    parser.add_argument('--data', type=str, default=None,
                        help='Directory with the MNIST IDX files (default: $BITFAULT_DATA, then the mnist asset)')
    parser.add_argument('--synthetic', action='store_true',
                        help='Evaluate on the synthetic digit set instead of MNIST')
    parser.add_argument('--threads', type=int, default=1,
                        help='Evaluate chips or restarts in parallel; 1 is the deterministic reference path')


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Train and evaluate quantized networks under memory bit errors')
    parser.add_argument('--verbose', action='store_true', help='Log per-chip and per-restart details')
    subparsers = parser.add_subparsers(dest='command')
    subparsers.required = True

    train = subparsers.add_parser('train', help='Train a model from a JSON experiment config')
    train.add_argument('config', help='Path to the experiment config')
    train.add_argument('--out', type=str, default=None, help='Output directory (overrides out_dir)')
    train.add_argument('--seed', type=int, default=None)
    train.add_argument('--regime', choices=training.REGIMES, default=None)
    train.add_argument('--p', type=float, default=None, help='Training bit error rate, in percent')
    train.add_argument('--epsilon', type=int, default=None, help='Adversarial training flip budget')
    train.add_argument('--epochs', type=int, default=None)
    train.add_argument('--train-examples', dest='train_examples', type=int, default=None)
    train.add_argument('--data', type=str, default=None, help='Directory with the MNIST IDX files')
    train.set_defaults(func=cmd_train)

    ev = subparsers.add_parser('evaluate', help='Clean and robust test error of a checkpoint')
    ev.add_argument('checkpoint', help='Checkpoint manifest (.json)')
    ev.add_argument('--p', type=float, nargs='+', default=None, help='Bit error rates, in percent')
    ev.add_argument('--profiled', type=str, default=None, help='Directory holding a profiled bit error map')
    ev.add_argument('--offsets', type=int, default=4, help='Number of linear mapping offsets into the profiled map')
    ev.add_argument('--target', choices=biterr.TARGETS, default='weights', help='Where random bit errors are injected')
    ev.add_argument('--chips', type=int, default=DEFAULT_CHIPS, help='Number of sampled chips')
    ev.add_argument('--fast', action='store_true', help='Use {} chips'.format(FAST_CHIPS))
    ev.add_argument('--examples', type=int, default=EVAL_EXAMPLES, help='Number of test examples to evaluate on')
    ev.add_argument('--confidence', type=float, default=None,
                    help='Also report mean confidence, clean and at this bit error rate (percent)')
    ev.add_argument('--delta', type=float, default=0.01, help='Failure probability of the reported deviation bound')
    ev.add_argument('--seed', type=int, default=0, help='Seed of the chip set')
    ev.add_argument('--name', type=str, default=None, help='Model label in the report')
    ev.add_argument('--out', type=str, required=True, help='Report prefix; writes <out>.json and <out>.csv')
    _add_data_options(ev)
    ev.set_defaults(func=cmd_evaluate)

    at = subparsers.add_parser('attack', help='Worst-case bit flips within a flip budget')
    at.add_argument('checkpoint', help='Checkpoint manifest (.json)')
    at.add_argument('--epsilon', type=int, default=80, help='Maximum number of flipped bits')
    at.add_argument('--restarts', type=int, default=16, help='Restart budget (a prefix of the 80-restart schedule)')
    at.add_argument('--iterations', type=int, default=10)
    at.add_argument('--seed', type=int, default=0)
    at.add_argument('--replay', type=str, default=None,
                    help='Re-apply the flips of a previous attack result and print the resulting error')
    at.add_argument('--out', type=str, default='attack.json', help='Where to write the worst flips (JSON)')
    _add_data_options(at)
    at.set_defaults(func=cmd_attack)

    bound = subparsers.add_parser('bound', help='Deviation bound between RTE on l chips and expected robust error')
    bound.add_argument('--n', type=int, required=True, help='Number of test examples')
    bound.add_argument('--l', type=int, required=True, help='Number of sampled chips')
    bound.add_argument('--delta', type=float, default=0.01, help='Failure probability, in (0, 1)')
    bound.set_defaults(func=cmd_bound)

    plot = subparsers.add_parser('plot-data', help='RTE against bit error rate for several checkpoints (CSV)')
    plot.add_argument('checkpoints', nargs='+', help='Checkpoint manifests (.json)')
    plot.add_argument('--p', type=float, nargs='+', default=[0.1, 0.5, 1, 2.5, 5, 10],
                      help='Bit error rates, in percent')
    plot.add_argument('--chips', type=int, default=FAST_CHIPS)
    plot.add_argument('--examples', type=int, default=EVAL_EXAMPLES)
    plot.add_argument('--seed', type=int, default=0)
    plot.add_argument('--out', type=str, required=True, help='CSV file to write')
    _add_data_options(plot)
    plot.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: ty.Sequence[str] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.getLogger('bitfault').setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except (exceptions.ConfigurationException, exceptions.ParseException) as e:
        logger.error('ERROR: {}'.format(e))
        return EXIT_CONFIG
    except exceptions.NumericException as e:
        logger.error('ERROR: {}{}'.format(e, ' (layer {})'.format(e.layer) if e.layer else ''))
        return EXIT_NUMERIC


def run_cli():
    """Command line arguments"""
    sys.exit(main())


if __name__ == '__main__':
    run_cli()
