"""
Adversarial bit error attack: projected gradient ascent on de-quantized weights, with every iterate projected back
    onto {at most epsilon flipped bits in total, at most one flipped bit per weight}
"""
import concurrent.futures
import itertools
import logging
import typing as ty

from attrs import define, field, asdict
import numpy as np

from . import biterr, exceptions, network, quant
from .const import STREAM_ATTACK_INIT


logger = logging.getLogger(__name__)


MODES = ('untargeted', 'targeted')
LAYER_SUBSETS = ('all', 'logits', 'first-conv', 'logits+first-conv', 'rest')
PROJECTION_RULES = ('exact', 'msb')

# Most significant set bit of every byte value
_MSB = np.array([0] + [1 << (i.bit_length() - 1) for i in range(1, 256)], dtype=np.uint8)


def _one_of(choices):
    def check(instance, attribute, value):
        if value not in choices:
            raise exceptions.ConfigurationException(
                '{} must be one of {}, not {}'.format(attribute.name, ', '.join(choices), value))
    return check


def _non_negative(instance, attribute, value):
    if value < 0:
        raise exceptions.ConfigurationException('{} must not be negative'.format(attribute.name))


def _at_least_one(instance, attribute, value):
    if value < 1:
        raise exceptions.ConfigurationException('{} must be at least 1'.format(attribute.name))


def _no_backtracking(instance, attribute, value):
    if value:
        raise exceptions.ConfigurationException('Backtracking is not supported')


@define
class AttackConfig:
    epsilon: int = field(default=80, validator=_non_negative)
    iterations: int = field(default=10, validator=_at_least_one)
    gamma: float = field(default=1.0, validator=_non_negative)
    momentum: float = field(default=0.9, validator=_non_negative)
    normalize: bool = True
    mode: str = field(default='untargeted', validator=_one_of(MODES))
    target_label: ty.Optional[int] = None
    layer_subset: str = field(default='all', validator=_one_of(LAYER_SUBSETS))
    init_seed: int = 0
    projection: str = field(default='msb', validator=_one_of(PROJECTION_RULES))
    backtracking: bool = field(default=False, validator=_no_backtracking)

    def __attrs_post_init__(self):
        if self.mode == 'targeted' and self.target_label is None:
            raise exceptions.ConfigurationException('A targeted attack needs a target_label')

    def to_dict(self) -> dict:
        return asdict(self)


class AttackResult:
    """Perturbed codes of the best iterate, plus the flips that produce them from the clean codes"""
    __slots__ = ('perturbed', 'flips', 'loss_trace', 'best_iter', 'config', 'failed', 'message')

    def __init__(self, perturbed: quant.QuantizedParams, flips: ty.List[ty.Tuple[str, int, int]],
                 loss_trace: ty.List[float], best_iter: int, config: AttackConfig, failed: bool = False,
                 message: str = None):
        self.perturbed = perturbed
        self.flips = flips
        self.loss_trace = loss_trace
        self.best_iter = best_iter
        self.config = config
        self.failed = failed
        self.message = message

    def to_dict(self) -> dict:
        return {
            'flips': [[t, int(i), int(b)] for t, i, b in self.flips],
            'loss_trace': [float(v) for v in self.loss_trace],
            'best_iter': self.best_iter,
            'config': self.config.to_dict(),
            'failed': self.failed,
            'message': self.message,
        }

    @classmethod
    def from_dict(cls, data: dict, clean: quant.QuantizedParams) -> 'AttackResult':
        flips = [(t, int(i), int(b)) for t, i, b in data['flips']]
        return cls(replay(clean, flips), flips, list(data.get('loss_trace', [])), data.get('best_iter', 0),
                   AttackConfig(**data['config']), failed=data.get('failed', False), message=data.get('message'))


def subset_tensors(net: network.Network, subset: str) -> ty.List[str]:
    """
    Parameter tensors an attack may touch. `logits` is the last fully connected layer, `first-conv` the first
        weight layer; `rest` is everything else.
    """
    if subset not in LAYER_SUBSETS:
        raise exceptions.ConfigurationException('Unknown layer subset: {}'.format(subset))
    names = net.param_names
    if subset == 'all':
        return names
    weighted = [layer.name for layer in net.layers if layer.kind in ('conv2d', 'linear')]
    convs = net.layer_names('conv2d')
    logits_layer = net.layer_names('linear')[-1]
    first_layer = convs[0] if convs else weighted[0]

    def owned(layer_name):
        return [n for n in names if n.split('.', 1)[0] == layer_name]

    if subset == 'logits':
        return owned(logits_layer)
    elif subset == 'first-conv':
        return owned(first_layer)
    chosen = owned(logits_layer) + [n for n in owned(first_layer) if n not in owned(logits_layer)]
    if subset == 'logits+first-conv':
        return [n for n in names if n in chosen]
    return [n for n in names if n not in chosen]


def hamming_project(v: np.ndarray, vt: np.ndarray, epsilon: int, scheme: quant.QuantScheme, lo: np.ndarray,
                    hi: np.ndarray, allowed: np.ndarray = None, rule: str = 'msb') -> np.ndarray:
    """
    Project perturbed words `vt` onto the set of words differing from `v` in at most one bit per weight and at most
        `epsilon` weights overall, measuring distance between de-quantized values.

    `msb` (the attack's rule) keeps the epsilon largest de-quantized changes and the most significant changed bit of
        each. `exact` is the true minimizer of the distance: for each weight the single-bit change closest to its
        perturbed value, then the epsilon weights whose change reduces the distance most; it may leave a weight
        untouched where `msb` would flip it. Ties go to the lower linear index.
    """
    v = np.asarray(v, dtype=np.uint8)
    vt = np.asarray(vt, dtype=np.uint8) & np.uint8(scheme.mask)
    out = v.copy()
    if epsilon <= 0:
        return out

    changed = v != vt
    if allowed is not None:
        changed &= allowed
    cand = np.flatnonzero(changed)
    if not cand.size:
        return out

    vs, ts = v[cand], vt[cand]
    lo_c, hi_c = np.broadcast_to(lo, v.shape)[cand], np.broadcast_to(hi, v.shape)[cand]
    target = quant.decode(ts, scheme, lo_c, hi_c)

    if rule == 'msb':
        magnitude = np.abs(target - quant.decode(vs, scheme, lo_c, hi_c))
        order = np.lexsort((cand, -magnitude))[:epsilon]
        out[cand[order]] = vs[order] ^ _MSB[vs[order] ^ ts[order]]
        return out
    elif rule != 'exact':
        raise exceptions.ConfigurationException('Unknown projection rule: {}'.format(rule))

    bits = (1 << np.arange(scheme.m)).astype(np.uint8)
    options = vs[:, None] ^ bits[None, :]
    cost = (target[:, None] - quant.decode(options, scheme, lo_c[:, None], hi_c[:, None])) ** 2
    # Among equal costs prefer the more significant bit
    best_bit = scheme.m - 1 - np.argmin(cost[:, ::-1], axis=1)
    gain = (target - quant.decode(vs, scheme, lo_c, hi_c)) ** 2 - cost[np.arange(cand.size), best_bit]

    order = np.lexsort((cand, -gain))
    order = order[gain[order] > 0][:epsilon]
    out[cand[order]] = options[order, best_bit[order]]
    return out


def _flat_gradient(grads, names, sizes, normalize: bool) -> np.ndarray:
    parts = []
    for name, size in zip(names, sizes):
        g = np.asarray(grads[name], dtype=np.float64).ravel()
        if normalize:
            peak = np.abs(g).max() if size else 0.0
            if peak > 0:
                g = g / peak
        parts.append(g)
    return np.concatenate(parts) if parts else np.zeros(0)


def list_flips(clean: np.ndarray, perturbed: np.ndarray, q: quant.QuantizedParams) -> ty.List[ty.Tuple[str, int, int]]:
    """(tensor, index within tensor, bit) for every differing bit"""
    names = q.names
    starts = np.cumsum([0] + [c.size for c in q.codes.values()])
    owner = q.tensor_of()
    flips = []
    diff = clean ^ perturbed
    for i in np.flatnonzero(diff):
        t = int(owner[i])
        word = int(diff[i])
        for b in range(q.scheme.m):
            if word >> b & 1:
                flips.append((names[t], int(i - starts[t]), b))
    return flips


def replay(q: quant.QuantizedParams, flips: ty.Iterable[ty.Tuple[str, int, int]]) -> quant.QuantizedParams:
    """Re-apply a flip list to clean codes"""
    out = q.copy()
    for tensor_name, index, bit in flips:
        if tensor_name not in out.codes:
            raise exceptions.ConfigurationException('Flip refers to unknown tensor {}'.format(tensor_name))
        codes = out.codes[tensor_name].reshape(-1)
        if not 0 <= index < codes.size:
            raise exceptions.ConfigurationException('Flip index {} is outside of {}'.format(index, tensor_name))
        codes[index] = biterr.flip_bit(codes[index], bit, q.scheme.m)
    return out


def attack(net: network.Network, q: quant.QuantizedParams, batch: ty.Tuple[np.ndarray, np.ndarray],
           cfg: AttackConfig) -> AttackResult:
    """
    Run one restart of the attack on a batch and return the iterate with the highest objective (the true-label loss
        for untargeted attacks, the negated target-label loss for targeted ones).
    """
    x, y = batch
    if len(y) == 0:
        raise exceptions.ConfigurationException('Attack batch is empty')
    if q.names != net.param_names:
        raise exceptions.ConfigurationException('Quantized parameters do not match the network')

    scheme = q.scheme
    names = q.names
    sizes = [c.size for c in q.codes.values()]
    allowed_tensors = set(subset_tensors(net, cfg.layer_subset))
    allowed = np.repeat([n in allowed_tensors for n in names], sizes)
    lo, hi = q.element_ranges()
    v = q.flat_codes()

    if cfg.mode == 'targeted':
        labels = np.full(len(y), cfg.target_label, dtype=np.int64)
        sign = -1.0
    else:
        labels = np.asarray(y)
        sign = 1.0

    # Random start: k ~ U{0..epsilon} flips on distinct weights
    rng = np.random.default_rng(biterr.derive_seed(cfg.init_seed, STREAM_ATTACK_INIT))
    eligible = np.flatnonzero(allowed)
    k = min(int(rng.integers(0, cfg.epsilon + 1)), eligible.size)
    chosen = rng.choice(eligible, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
    vt = v.copy()
    vt[chosen] ^= (1 << rng.integers(0, scheme.m, size=k)).astype(np.uint8)

    accumulator = quant.decode(vt, scheme, lo, hi)
    velocity = np.zeros_like(accumulator)
    trace = []  # type: ty.List[float]
    best_objective = -np.inf
    best_iter = 0
    best_vt = vt.copy()
    failed = False
    message = None

    for t in range(cfg.iterations + 1):
        override = q.from_flat(vt)
        try:
            grads, loss = network.backward(net, x, labels, param_override=quant.dequantize(override))
        except exceptions.NumericException as e:
            failed = True
            message = str(e)
            logger.warning('Attack restart (seed {}) stopped at iteration {}: {}'.format(cfg.init_seed, t, e))
            break
        trace.append(loss)
        if sign * loss > best_objective:
            best_objective = sign * loss
            best_iter = t
            best_vt = vt.copy()
        if t == cfg.iterations:
            break

        g = _flat_gradient(grads, names, sizes, cfg.normalize)
        g[~allowed] = 0
        velocity = cfg.momentum * velocity + g
        accumulator = accumulator + sign * cfg.gamma * velocity
        vt = quant.encode(accumulator, scheme, lo, hi)
        vt = hamming_project(v, vt, cfg.epsilon, scheme, lo, hi, allowed=allowed, rule=cfg.projection)

    return AttackResult(q.from_flat(best_vt), list_flips(v, best_vt, q), trace, best_iter, cfg,
                        failed=failed, message=message)


def _restart_groups(epsilon: int, num_classes: int, base: AttackConfig) -> ty.List[ty.List[dict]]:
    groups = []
    for subset in LAYER_SUBSETS:
        untargeted = [dict(layer_subset=subset, mode='untargeted', momentum=base.momentum) for _ in range(5)]
        targeted = [dict(layer_subset=subset, mode='targeted', target_label=label, momentum=base.momentum)
                    for label in range(num_classes)]
        lists = [untargeted, targeted]
        if subset == 'all':
            lists.append([dict(layer_subset=subset, mode='untargeted', momentum=0.0) for _ in range(5)])
        groups.append([
            item for item in itertools.chain.from_iterable(itertools.zip_longest(*lists)) if item is not None])
    return groups


def make_restarts(budget: int, epsilon: int, num_classes: int = 10, seed: int = 0,
                  base: AttackConfig = None) -> ty.List[AttackConfig]:
    """
    The restart schedule: untargeted (with and without momentum) and per-label targeted attacks over the layer
        subsets all / logits / first-conv / both / rest. 80 restarts for 10 classes; the order interleaves subsets
        and modes, and a smaller budget is always a prefix of a larger one. Budgets beyond one round repeat the
        schedule with new seeds.
    """
    if budget < 1:
        raise exceptions.ConfigurationException('Restart budget must be at least 1')
    base = base or AttackConfig(epsilon=epsilon)
    groups = _restart_groups(epsilon, num_classes, base)
    schedule = [item for item in itertools.chain.from_iterable(itertools.zip_longest(*groups)) if item is not None]

    configs = []
    for i in range(budget):
        rnd, pos = divmod(i, len(schedule))
        options = base.to_dict()
        options.update(schedule[pos])
        options.update(epsilon=epsilon, init_seed=biterr.derive_seed(seed, 'restart', rnd, pos))
        if options['mode'] == 'untargeted':
            options['target_label'] = None
        configs.append(AttackConfig(**options))
    return configs


class SuiteResult:
    """Worst restart by evaluation error, plus one table row per restart"""
    __slots__ = ('worst', 'worst_error', 'table')

    def __init__(self, worst: AttackResult, worst_error: float, table: ty.List[dict]):
        self.worst = worst
        self.worst_error = worst_error
        self.table = table


def attack_suite(net: network.Network, q: quant.QuantizedParams, batch: ty.Tuple[np.ndarray, np.ndarray],
                 epsilon: int, restarts_spec: ty.Union[int, ty.Sequence[AttackConfig]],
                 eval_data: ty.Tuple[np.ndarray, np.ndarray] = None, seed: int = 0, threads: int = 1,
                 base: AttackConfig = None) -> SuiteResult:
    """
    Run every restart and keep the one with the highest error on `eval_data` (the attack batch if not given).

    :param restarts_spec: A restart budget for `make_restarts`, or an explicit list of configs
    """
    if isinstance(restarts_spec, int):
        configs = make_restarts(restarts_spec, epsilon, net.num_classes, seed=seed, base=base)
    else:
        configs = list(restarts_spec)
        if not configs:
            raise exceptions.ConfigurationException('Restart budget must be at least 1')
    x_eval, y_eval = eval_data if eval_data is not None else batch

    def run_one(item):
        index, cfg = item
        result = attack(net, q, batch, cfg)
        error = network.error_rate(net, x_eval, y_eval, param_override=quant.dequantize(result.perturbed))
        logger.debug('Restart {} ({} {}, target {}): error {:.4f}'.format(
            index, cfg.mode, cfg.layer_subset, cfg.target_label, error))
        return result, error

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, enumerate(configs)))
    else:
        outcomes = [run_one(item) for item in enumerate(configs)]

    table = []
    worst_index = 0
    for index, (cfg, (result, error)) in enumerate(zip(configs, outcomes)):
        table.append({
            'restart': index,
            'mode': cfg.mode,
            'layer_subset': cfg.layer_subset,
            'target_label': cfg.target_label,
            'momentum': cfg.momentum,
            'init_seed': cfg.init_seed,
            'error': error,
            'best_loss': result.loss_trace[result.best_iter] if result.loss_trace else None,
            'flips': len(result.flips),
            'failed': result.failed,
        })
        if error > outcomes[worst_index][1]:
            worst_index = index
    worst, worst_error = outcomes[worst_index]
    return SuiteResult(worst, worst_error, table)
