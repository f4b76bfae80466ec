"""
Training regimes: quantization-aware training with optional weight clipping, random bit error training (clean and
    perturbed gradients summed once the clean loss passes a gate), and adversarial bit error training
"""
import logging
import typing as ty

import attrs
from attrs import define, field
import numpy as np

from . import attack as adv, biterr, datasets, exceptions, network, optim, quant as quantization, storage
from .const import (
    ADV_GRAD_CLIP, CLIP_FLOOR, DIVERGENCE_EPOCHS, DIVERGENCE_FACTOR, LOSS_GATE,
    STREAM_ATTACK_INIT, STREAM_BIT_ERROR, STREAM_SHUFFLE,
)


logger = logging.getLogger(__name__)


REGIMES = ('normal', 'randbet', 'advbet')
CLIP_MODES = ('none', 'global', 'per-layer')


def _one_of(choices):
    def check(instance, attribute, value):
        if value not in choices:
            raise exceptions.ConfigurationException(
                '{} must be one of {}, not {}'.format(attribute.name, ', '.join(choices), value))
    return check


def _rate(instance, attribute, value):
    if value is not None and not 0 <= value <= 1:
        raise exceptions.RangeException('{} must lie in [0, 1]'.format(attribute.name))


@define
class ClipSpec:
    """
    Weight clipping: one bound `wmax` for every tensor, or per-tensor bounds max(floor, kappa) * wmax where kappa is
        the tensor's range relative to the widest tensor of a reference model
    """
    mode: str = field(default='none', validator=_one_of(CLIP_MODES))
    wmax: float = 0.0
    kappa: ty.Dict[str, float] = field(factory=dict)
    floor: float = CLIP_FLOOR

    def __attrs_post_init__(self):
        if self.mode != 'none' and self.wmax <= 0:
            raise exceptions.ConfigurationException('Clipping needs a positive wmax')

    def bound(self, name: str) -> ty.Optional[float]:
        if self.mode == 'none':
            return None
        if self.mode == 'global':
            return self.wmax
        if name not in self.kappa:
            raise exceptions.ConfigurationException('No per-layer clipping ratio for {}'.format(name))
        return max(self.floor, self.kappa[name]) * self.wmax

    def project(self, params: ty.Mapping[str, np.ndarray]):
        """Clip every tensor to [-bound, bound] in place"""
        if self.mode == 'none':
            return
        for name, w in params.items():
            b = self.bound(name)
            np.clip(w, -b, b, out=w)

    def to_dict(self) -> dict:
        return attrs.asdict(self)


def derive_perlayer_bounds(reference: network.Network, wmax: float, floor: float = CLIP_FLOOR) -> ClipSpec:
    peaks = {name: float(np.abs(w).max()) if w.size else 0.0 for name, w in reference.parameters().items()}
    top = max(peaks.values()) if peaks else 0.0
    kappa = {name: (peak / top if top > 0 else 1.0) for name, peak in peaks.items()}
    return ClipSpec(mode='per-layer', wmax=wmax, kappa=kappa, floor=floor)


def _default_attack() -> adv.AttackConfig:
    return adv.AttackConfig(epsilon=160, iterations=10, gamma=0.5, momentum=0.0, normalize=True)


@define
class TrainConfig:
    regime: str = field(default='normal', validator=_one_of(REGIMES))
    # Bit error rate for weights; inputs and activations use their own rate when given
    p: float = field(default=0.01, validator=_rate)
    targets: ty.Tuple[str, ...] = field(default=('weights',), converter=tuple)
    p_inputs: ty.Optional[float] = field(default=None, validator=_rate)
    p_activations: ty.Optional[float] = field(default=None, validator=_rate)
    attack: adv.AttackConfig = field(factory=_default_attack)
    clip: ClipSpec = field(factory=ClipSpec)
    quant: ty.Optional[quantization.QuantScheme] = field(factory=quantization.rquant)
    loss_gate: float = LOSS_GATE
    label_smoothing: float = 0.0
    sgd: optim.SgdConfig = field(factory=optim.SgdConfig)
    adv_grad_clip: float = ADV_GRAD_CLIP
    # Reuse one bit error pattern for every step instead of drawing a new one
    fixed_pattern: bool = False
    seed: int = 0

    def __attrs_post_init__(self):
        unknown = set(self.targets) - set(biterr.TARGETS)
        if unknown:
            raise exceptions.ConfigurationException('Unknown bit error targets: {}'.format(', '.join(sorted(unknown))))
        if self.regime != 'normal' and self.quant is None:
            raise exceptions.ConfigurationException('{} training needs a quantization scheme'.format(self.regime))

    def to_dict(self) -> dict:
        return {
            'regime': self.regime,
            'p': self.p,
            'targets': list(self.targets),
            'p_inputs': self.p_inputs,
            'p_activations': self.p_activations,
            'attack': self.attack.to_dict(),
            'clip': self.clip.to_dict(),
            'quant': self.quant.to_dict() if self.quant else None,
            'loss_gate': self.loss_gate,
            'label_smoothing': self.label_smoothing,
            'sgd': self.sgd.to_dict(),
            'adv_grad_clip': self.adv_grad_clip,
            'fixed_pattern': self.fixed_pattern,
            'seed': self.seed,
        }


class History:
    """Per-step and per-epoch training records"""
    FIELDS = ('epoch', 'clean_loss', 'perturbed_loss', 'lr', 'gate', 'injected_steps')
    __slots__ = ('epochs', 'steps')

    def __init__(self):
        self.epochs = []  # type: ty.List[dict]
        self.steps = []  # type: ty.List[dict]

    def gate_step(self) -> ty.Optional[int]:
        """First step at which the gate was open, if any"""
        for record in self.steps:
            if record['gate']:
                return record['step']
        return None

    def to_csv(self, path: str):
        storage.write_rows(path, self.FIELDS, ([row[k] for k in self.FIELDS] for row in self.epochs))


class Trainer:
    """Owns the network for the duration of training and runs one regime over the configured epochs"""
    def __init__(self, net: network.Network, data, cfg: TrainConfig):
        self.net = net
        self.x, self.y = datasets.as_arrays(data)
        if not len(self.y):
            raise exceptions.ConfigurationException('Training data is empty')
        self.cfg = cfg
        self.loss_cfg = network.LossConfig(label_smoothing=cfg.label_smoothing)
        self.state = optim.SgdState()
        self.history = History()
        self.gate_open = False
        self._shuffle = np.random.default_rng(biterr.derive_seed(cfg.seed, STREAM_SHUFFLE))
        self._fixed_chip = biterr.ChipSample(biterr.derive_seed(cfg.seed, STREAM_BIT_ERROR, 'fixed'))

    def _chip(self) -> biterr.ChipSample:
        if self.cfg.fixed_pattern:
            return self._fixed_chip
        return biterr.ChipSample(biterr.derive_seed(self.cfg.seed, STREAM_BIT_ERROR, self.state.step))

    def _quantized(self) -> ty.Tuple[ty.Optional[quantization.QuantizedParams], ty.Mapping[str, np.ndarray]]:
        params = self.net.parameters()
        self.cfg.clip.project(params)
        if self.cfg.quant is None:
            return None, params
        q = quantization.quantize(params, self.cfg.quant)
        return q, quantization.dequantize(q)

    def _perturbed_pass(self, q: quantization.QuantizedParams, wq, x, y):
        cfg = self.cfg
        if cfg.regime == 'randbet':
            chip = self._chip()
            weights = wq
            inputs = x
            hooks = []
            if 'weights' in cfg.targets:
                weights = quantization.dequantize(biterr.inject_random(q, chip, cfg.p))
            if 'inputs' in cfg.targets:
                rate = cfg.p if cfg.p_inputs is None else cfg.p_inputs
                inputs = biterr.inject_input(x, rate, biterr.derive_seed(chip.chip_seed, 'inputs'))
            if 'activations' in cfg.targets:
                rate = cfg.p if cfg.p_activations is None else cfg.p_activations
                hooks.append(biterr.ActivationBitErrors(rate, biterr.derive_seed(chip.chip_seed, 'activations')))
            return network.backward(self.net, inputs, y, self.loss_cfg, param_override=weights, hooks=hooks)

        attack_cfg = attrs.evolve(cfg.attack, init_seed=biterr.derive_seed(cfg.seed, STREAM_ATTACK_INIT,
                                                                            self.state.step))
        result = adv.attack(self.net, q, (x, y), attack_cfg)
        return network.backward(self.net, x, y, self.loss_cfg, param_override=quantization.dequantize(result.perturbed))

    def step(self, x: np.ndarray, y: np.ndarray) -> dict:
        cfg = self.cfg
        q, wq = self._quantized()
        grads, clean_loss = network.backward(self.net, x, y, self.loss_cfg, param_override=wq)

        if cfg.regime != 'normal' and not self.gate_open and clean_loss < cfg.loss_gate:
            self.gate_open = True
            logger.info('Clean loss {:.4f} below gate {}; injecting bit errors from step {}'.format(
                clean_loss, cfg.loss_gate, self.state.step))

        perturbed_loss = None
        if self.gate_open:
            perturbed, perturbed_loss = self._perturbed_pass(q, wq, x, y)
            if cfg.regime == 'randbet':
                grads = type(grads)((k, g + perturbed[k]) for k, g in grads.items())
            else:
                grads = type(grads)((k, np.clip(g, -cfg.adv_grad_clip, cfg.adv_grad_clip))
                                    for k, g in perturbed.items())

        record = {
            'step': self.state.step,
            'epoch': self.state.epoch,
            'clean_loss': clean_loss,
            'perturbed_loss': perturbed_loss,
            'gate': self.gate_open,
            'injected': perturbed_loss is not None,
            'max_abs_grad': max((float(np.abs(g).max()) for g in grads.values() if g.size), default=0.0),
        }
        optim.sgd_step(self.net, grads, self.state, cfg.sgd, clip_spec=cfg.clip)
        return record

    def run(self) -> ty.Tuple[network.Network, History]:
        cfg = self.cfg
        n = len(self.y)
        initial_loss = None
        strikes = 0
        for epoch in range(cfg.sgd.epochs):
            self.state.epoch = epoch
            lr = optim.learning_rate(cfg.sgd, epoch)
            records = []
            for x, y in datasets.iterate_batches(self.x, self.y, cfg.sgd.batch_size, self._shuffle):
                record = self.step(x, y)
                if initial_loss is None:
                    initial_loss = record['clean_loss']
                records.append(record)
            self.history.steps.extend(records)

            perturbed = [r['perturbed_loss'] for r in records if r['injected']]
            row = {
                'epoch': epoch,
                'clean_loss': float(np.mean([r['clean_loss'] for r in records])),
                'perturbed_loss': float(np.mean(perturbed)) if perturbed else None,
                'lr': lr,
                'gate': self.gate_open,
                'injected_steps': len(perturbed),
            }
            self.history.epochs.append(row)
            logger.info('Epoch {}: clean loss {:.4f}, perturbed loss {}, lr {:g}, gate {} ({} examples)'.format(
                epoch, row['clean_loss'],
                '{:.4f}'.format(row['perturbed_loss']) if perturbed else '-', lr,
                'open' if self.gate_open else 'closed', n))

            if row['clean_loss'] > DIVERGENCE_FACTOR * initial_loss:
                strikes += 1
                if strikes >= DIVERGENCE_EPOCHS:
                    losses = [r['clean_loss'] for r in self.history.epochs]
                    raise exceptions.TrainingDivergedException(
                        'Clean loss stayed above {}x the initial loss ({:.4f}) for {} epochs: {}'.format(
                            DIVERGENCE_FACTOR, initial_loss, strikes, losses),
                        losses=losses, layer='loss')
            else:
                strikes = 0
        return self.net, self.history


def _require(cfg: TrainConfig, regime: str):
    if cfg.regime != regime:
        raise exceptions.ConfigurationException('Expected a {} configuration, got {}'.format(regime, cfg.regime))


def train_normal(net: network.Network, data, cfg: TrainConfig) -> ty.Tuple[network.Network, History]:
    """Quantization-aware training: clip, fake-quantize, backward on the quantized weights, update the floats"""
    _require(cfg, 'normal')
    return Trainer(net, data, cfg).run()


def train_randbet(net: network.Network, data, cfg: TrainConfig) -> ty.Tuple[network.Network, History]:
    """Once the gate opens, add the gradient of a pass with random bit errors to the clean gradient"""
    _require(cfg, 'randbet')
    return Trainer(net, data, cfg).run()


def train_advbet(net: network.Network, data, cfg: TrainConfig) -> ty.Tuple[network.Network, History]:
    """Once the gate opens, train only on adversarially perturbed weights, with gradients clipped entrywise"""
    _require(cfg, 'advbet')
    return Trainer(net, data, cfg).run()


def train(net: network.Network, data, cfg: TrainConfig) -> ty.Tuple[network.Network, History]:
    return {'normal': train_normal, 'randbet': train_randbet, 'advbet': train_advbet}[cfg.regime](net, data, cfg)
