"""
Metrics for quantized networks: clean test error, robust test error under random, profiled and adversarial bit
    errors, confidence statistics, and the deviation bound that relates RTE over a finite set of chips to the
    expected robust error.
"""
import collections
import concurrent.futures
import json
import logging
import math
import typing as ty

import numpy as np

from . import attack as adv, biterr, datasets, exceptions, network, quant, tensor as T
from .const import STREAM_CHIPS


logger = logging.getLogger(__name__)


REPORT_FIELDS = ('model', 'kind', 'x', 'mean', 'std', 'min', 'max')


def _params(q: ty.Optional[quant.QuantizedParams]):
    return quant.dequantize(q) if q is not None else None


def _map(func, items, threads: int) -> list:
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def test_error(net: network.Network, q: ty.Optional[quant.QuantizedParams], data, batch_size: int = 500) -> float:
    """Error of the de-quantized model (or the float model when `q` is None)"""
    x, y = datasets.as_arrays(data)
    return network.error_rate(net, x, y, param_override=_params(q), batch_size=batch_size)


class RteStats:
    """Errors for one rate (or one setting) across chips"""
    __slots__ = ('x', 'errors')

    def __init__(self, x: float, errors: ty.Sequence[float]):
        if not len(errors):
            raise exceptions.ConfigurationException('No chips were evaluated')
        self.x = x
        self.errors = [float(e) for e in errors]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))

    @property
    def min(self) -> float:
        return min(self.errors)

    @property
    def max(self) -> float:
        return max(self.errors)

    def to_dict(self) -> dict:
        return {'mean': self.mean, 'std': self.std, 'min': self.min, 'max': self.max, 'errors': list(self.errors)}

    def row(self, model: str, kind: str) -> tuple:
        return model, kind, self.x, self.mean, self.std, self.min, self.max

    def __repr__(self):
        return '<RteStats x={} mean={:.4f} std={:.4f} chips={}>'.format(self.x, self.mean, self.std, len(self.errors))


def evaluate_rte(net: network.Network, q: quant.QuantizedParams, chips: ty.Sequence[biterr.ChipSample], p: float,
                 data, target: str = 'weights', batch_size: int = 500, threads: int = 1) -> RteStats:
    """
    Error after injecting random bit errors at rate p, once per chip. The same chip flips the same bits for every
        model of the same size, so results are comparable across models and rates.

    :param target: 'weights' (stored codes), 'inputs' (8-bit images, once per example position), or 'activations'
        (after every block)
    """
    if not chips:
        raise exceptions.ConfigurationException('At least one chip is required')
    x, y = datasets.as_arrays(data)
    if not len(y):
        raise exceptions.ConfigurationException('Evaluation data is empty')

    def run_one(chip):
        spec = biterr.ErrorSpec(target=target, model='uniform', p=p, chip=chip)
        error = network.error_rate(net, spec.perturb_inputs(x), y,
                                   param_override=quant.dequantize(spec.perturb_params(q)),
                                   hooks=spec.hooks(), batch_size=batch_size)
        logger.debug('{} at p={}: error {:.4f}'.format(chip, p, error))
        return error

    return RteStats(p, _map(run_one, chips, threads))


def rte_curve(net: network.Network, q: quant.QuantizedParams, chips: ty.Sequence[biterr.ChipSample],
              ps: ty.Iterable[float], data, target: str = 'weights', batch_size: int = 500,
              threads: int = 1) -> 'collections.OrderedDict[float, RteStats]':
    curve = collections.OrderedDict()
    for p in ps:
        curve[p] = evaluate_rte(net, q, chips, p, data, target=target, batch_size=batch_size, threads=threads)
        logger.info('RTE at p={:g}%: {:.2f} +- {:.2f}%'.format(p * 100, curve[p].mean * 100, curve[p].std * 100))
    return curve


def evaluate_profiled(net: network.Network, q: quant.QuantizedParams, pmap: biterr.ProfiledMap,
                      offsets: ty.Sequence[int], data, seed: int = 0, batch_size: int = 500,
                      threads: int = 1) -> RteStats:
    """Error under a profiled map, one evaluation per linear mapping offset; `x` is the map's mean rate"""
    if not offsets:
        raise exceptions.ConfigurationException('At least one map offset is required')
    x, y = datasets.as_arrays(data)

    def run_one(offset):
        perturbed = biterr.inject_profiled(q, pmap, offset=offset,
                                           rng_seed=biterr.derive_seed(seed, STREAM_CHIPS, 'profiled', offset))
        return network.error_rate(net, x, y, param_override=quant.dequantize(perturbed), batch_size=batch_size)

    return RteStats(pmap.mean_rate(), _map(run_one, offsets, threads))


class AdversarialReport:
    __slots__ = ('epsilon', 'worst_error', 'worst', 'table')

    def __init__(self, epsilon: int, worst_error: float, worst: adv.AttackResult, table: ty.List[dict]):
        self.epsilon = epsilon
        self.worst_error = worst_error
        self.worst = worst
        self.table = table

    def to_dict(self) -> dict:
        return {'epsilon': self.epsilon, 'worst': self.worst_error, 'restarts': self.table}

    def row(self, model: str) -> tuple:
        errors = [r['error'] for r in self.table]
        return (model, 'adv', self.epsilon, self.worst_error, float(np.std(errors)), float(min(errors)),
                float(max(errors)))


def evaluate_adversarial(net: network.Network, q: quant.QuantizedParams, epsilon: int,
                         restarts_spec: ty.Union[int, ty.Sequence[adv.AttackConfig]], attack_data, eval_data,
                         seed: int = 0, threads: int = 1) -> AdversarialReport:
    """
    Worst error on `eval_data` over all restarts of the attack, each run on `attack_data`. Keeping the two sets apart
        avoids selecting the restart on the examples that are scored.
    """
    suite = adv.attack_suite(net, q, datasets.as_arrays(attack_data), epsilon, restarts_spec,
                             eval_data=datasets.as_arrays(eval_data), seed=seed, threads=threads)
    logger.info('Worst RTE at epsilon={}: {:.2f}% over {} restarts'.format(
        epsilon, suite.worst_error * 100, len(suite.table)))
    return AdversarialReport(epsilon, suite.worst_error, suite.worst, suite.table)


def confidence_stats(net: network.Network, q: ty.Optional[quant.QuantizedParams], data,
                     spec: biterr.ErrorSpec = None, bins: int = 10, batch_size: int = 500) -> dict:
    """
    Confidence is the largest softmax probability. Returns its mean, a histogram over [0, 1] and the mean per true
        class; with an error spec the statistics are taken on the perturbed model.
    """
    x, y = datasets.as_arrays(data)
    hooks = []  # type: ty.List
    if spec is not None:
        x = spec.perturb_inputs(x)
        hooks = spec.hooks()
        if q is not None:
            q = spec.perturb_params(q)
        elif spec.target == 'weights' and not spec.is_noop:
            raise exceptions.ConfigurationException('Weight bit errors need quantized parameters')
    logits = network.predict(net, x, param_override=_params(q), hooks=hooks, batch_size=batch_size)
    confidence = np.exp(T.log_softmax(logits.astype(np.float64))).max(axis=1)
    counts, _ = np.histogram(confidence, bins=bins, range=(0.0, 1.0))
    per_class = {}
    for label in range(net.num_classes):
        picked = confidence[np.asarray(y) == label]
        if picked.size:
            per_class[label] = float(picked.mean())
    return {'mean': float(confidence.mean()), 'histogram': counts.tolist(), 'per_class': per_class}


def bound_excess(n: int, l: int, delta: float) -> float:
    """
    With probability 1 - delta over the test set and the l sampled chips, the expected robust error exceeds the
        empirical RTE by at most sqrt(log((n + 1) / delta) / n) * (sqrt(l) + sqrt(n)) / sqrt(l).

    `delta` is the failure probability: 0.01 for a 99% statement.
    """
    if n < 1 or l < 1:
        raise exceptions.RangeException('n and l must be at least 1')
    if not 0 < delta < 1:
        raise exceptions.RangeException('delta must lie strictly between 0 and 1, not {}'.format(delta))
    return math.sqrt(math.log((n + 1) / delta) / n) * (math.sqrt(l) + math.sqrt(n)) / math.sqrt(l)


class EvalReport:
    """Everything measured for one model"""
    __slots__ = ('model', 'te', 'rte', 'profiled', 'adv', 'confidence', 'n', 'l', 'delta')

    def __init__(self, model: str, te: float, n: int, l: int = 0, delta: float = 0.01):
        self.model = model
        self.te = te
        self.n = n
        self.l = l
        self.delta = delta
        self.rte = collections.OrderedDict()  # type: collections.OrderedDict
        self.profiled = None  # type: ty.Optional[RteStats]
        self.adv = collections.OrderedDict()  # type: collections.OrderedDict
        self.confidence = {}  # type: dict

    def to_dict(self) -> dict:
        return {
            'model': self.model,
            'te': self.te,
            'n': self.n,
            'l': self.l,
            'bound': {
                'delta': self.delta,
                'excess': bound_excess(self.n, self.l, self.delta) if self.n and self.l else None,
            },
            'rte': {repr(p): stats.to_dict() for p, stats in self.rte.items()},
            'profiled': self.profiled.to_dict() if self.profiled else None,
            'adv_rte': {str(eps): report.to_dict() for eps, report in self.adv.items()},
            'confidence': self.confidence,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def rows(self) -> ty.List[tuple]:
        rows = [(self.model, 'te', '', self.te, 0.0, self.te, self.te)]
        rows.extend(stats.row(self.model, 'rte') for stats in self.rte.values())
        if self.profiled is not None:
            rows.append(self.profiled.row(self.model, 'profiled'))
        rows.extend(report.row(self.model) for report in self.adv.values())
        return rows


def plot_rows(curves: ty.Mapping[str, ty.Mapping[float, RteStats]]) -> ty.List[tuple]:
    """Flatten {model: {p: stats}} into report rows with p in percent, ordered by model then p"""
    rows = []
    for model, curve in curves.items():
        for p in sorted(curve):
            stats = curve[p]
            rows.append((model, 'rte', p * 100, stats.mean, stats.std, stats.min, stats.max))
    return rows
