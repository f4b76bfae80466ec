"""
Stochastic gradient descent with momentum, weight decay, a step learning-rate schedule and optional weight clipping
"""
import typing as ty

from attrs import define, field, asdict
import numpy as np

from . import exceptions


def _positive(instance, attribute, value):
    if value <= 0:
        raise exceptions.ConfigurationException('{} must be positive'.format(attribute.name))


def _non_negative(instance, attribute, value):
    if value < 0:
        raise exceptions.ConfigurationException('{} must not be negative'.format(attribute.name))


def _momentum(instance, attribute, value):
    if not 0 <= value < 1:
        raise exceptions.ConfigurationException('momentum must lie in [0, 1)')


@define
class SgdConfig:
    lr0: float = field(default=0.05, validator=_positive)
    momentum: float = field(default=0.9, validator=_momentum)
    weight_decay: float = field(default=5e-4, validator=_non_negative)
    # Fractions of the epoch budget after which the rate is multiplied by 0.1
    milestones: ty.Tuple[float, ...] = field(default=(0.4, 0.6, 0.8), converter=tuple)
    batch_size: int = field(default=128, validator=_positive)
    epochs: int = field(default=20, validator=_positive)

    def to_dict(self) -> dict:
        d = asdict(self)
        d['milestones'] = list(self.milestones)
        return d


class SgdState:
    """Mutable optimizer state: momentum buffers plus step and epoch counters"""
    __slots__ = ('velocity', 'step', 'epoch')

    def __init__(self):
        self.velocity = {}  # type: ty.Dict[str, np.ndarray]
        self.step = 0
        self.epoch = 0


def learning_rate(cfg: SgdConfig, epoch: int) -> float:
    crossed = sum(1 for m in cfg.milestones if epoch >= m * cfg.epochs)
    return cfg.lr0 * (0.1 ** crossed)


def sgd_step(net, grads: ty.Mapping[str, np.ndarray], state: SgdState, cfg: SgdConfig,
             clip_spec=None, lr: float = None) -> SgdState:
    """
    Update the stored float parameters in place:
        g' = g + wd * w;  v = mu * v + g';  w = w - lr * v
    If `clip_spec` is given, each tensor is then projected onto its clipping interval.
    """
    lr = learning_rate(cfg, state.epoch) if lr is None else lr
    params = net.parameters()
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        raise exceptions.ShapeException('Gradients do not match param_index (missing: {})'.format(missing))

    for name, w in params.items():
        g = np.asarray(grads[name], dtype=w.dtype)
        if g.shape != w.shape:
            raise exceptions.ShapeException('Gradient for {} has shape {}, expected {}'.format(name, g.shape, w.shape),
                                            layer=name.split('.')[0])
        if cfg.weight_decay:
            g = g + cfg.weight_decay * w
        if cfg.momentum:
            v = state.velocity.get(name)
            v = g.copy() if v is None else cfg.momentum * v + g
            state.velocity[name] = v
            g = v
        w -= (lr * g).astype(w.dtype, copy=False)

    if clip_spec is not None:
        clip_spec.project(params)
    state.step += 1
    return state
