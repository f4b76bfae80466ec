"""
Experiment configuration: JSON files whose sections mirror the typed config records

    {
      "name": "randbet-p1",
      "seed": 0,
      "architecture": {"name": "simplenet", "preset": "mnist-half"},
      "data": {"source": "mnist", "train_examples": 10000},
      "train": {"regime": "randbet", "p": 0.01, "clip": {"mode": "global", "wmax": 0.1},
                "quant": {"m": 8}, "sgd": {"epochs": 20}},
      "eval": {"ps": [0.001, 0.01], "epsilons": [80], "chips": 50, "restarts": 16}
    }
"""
import json
import os
import typing as ty

import attrs
from attrs import define, field

from . import attack as adv, datasets, exceptions, optim, quant, training
from .const import ATTACK_EXAMPLES, DEFAULT_CHIPS


def _construct(cls, section: ty.Optional[dict], label: str):
    try:
        return cls(**(section or {}))
    except TypeError as e:
        raise exceptions.ConfigurationException('Invalid {} section: {}'.format(label, e))


def scheme_from_dict(section: ty.Union[dict, str, None]) -> ty.Optional[quant.QuantScheme]:
    """A scheme record, a preset name ('rquant' / 'normal'), or None for float training"""
    if section is None:
        return None
    if isinstance(section, str):
        presets = {'rquant': quant.rquant, 'normal': quant.normal}
        if section not in presets:
            raise exceptions.ConfigurationException('Unknown quantization preset: {}'.format(section))
        return presets[section]()
    return _construct(quant.QuantScheme, section, 'quant')


def sgd_from_dict(section: dict = None) -> optim.SgdConfig:
    return _construct(optim.SgdConfig, section, 'sgd')


def attack_from_dict(section: dict = None, base: adv.AttackConfig = None) -> adv.AttackConfig:
    options = base.to_dict() if base else {}
    options.update(section or {})
    return _construct(adv.AttackConfig, options, 'attack')


def clip_from_dict(section: dict = None) -> training.ClipSpec:
    """
    Per-layer clipping either lists `kappa` directly or names a `reference` checkpoint to derive the ratios from
    """
    section = dict(section or {})
    reference = section.pop('reference', None)
    if reference is not None:
        if section.get('mode', 'per-layer') != 'per-layer':
            raise exceptions.ConfigurationException('A clipping reference only applies to per-layer clipping')
        from . import storage
        net, _, _ = storage.load_checkpoint(reference)
        return training.derive_perlayer_bounds(net, section.get('wmax', 0.0),
                                               floor=section.get('floor', training.CLIP_FLOOR))
    return _construct(training.ClipSpec, section, 'clip')


def train_from_dict(section: dict = None) -> training.TrainConfig:
    section = dict(section or {})
    nested = {
        'sgd': sgd_from_dict(section.pop('sgd', None)),
        'clip': clip_from_dict(section.pop('clip', None)),
        'attack': attack_from_dict(section.pop('attack', None), base=training.TrainConfig().attack),
    }
    if 'quant' in section:
        nested['quant'] = scheme_from_dict(section.pop('quant'))
    section.update(nested)
    return _construct(training.TrainConfig, section, 'train')


@define
class DataSpec:
    source: str = 'mnist'
    path: ty.Optional[str] = None
    train_examples: ty.Optional[int] = None
    test_examples: ty.Optional[int] = None
    attack_examples: int = ATTACK_EXAMPLES
    # Synthetic source only
    synthetic_train: int = 2000
    synthetic_test: int = 500
    seed: int = 0

    def __attrs_post_init__(self):
        if self.source not in ('mnist', 'synthetic'):
            raise exceptions.ConfigurationException('Unknown data source: {}'.format(self.source))

    def load(self) -> ty.Tuple[datasets.Dataset, datasets.Dataset]:
        """(train, test) with the configured number of examples"""
        if self.source == 'synthetic':
            train = datasets.synthetic_digits(self.synthetic_train, seed=self.seed, prototype_seed=self.seed)
            test = datasets.synthetic_digits(self.synthetic_test, seed=self.seed + 1, prototype_seed=self.seed)
        else:
            splits = datasets.load_mnist(self.path)
            train, test = splits['train'], splits['test']
        if self.train_examples:
            train = train.subset(self.train_examples)
        if self.test_examples:
            test = test.subset(self.test_examples)
        return train, test


@define
class EvalSpec:
    # Bit error rates as fractions
    ps: ty.List[float] = field(factory=lambda: [0.001, 0.01, 0.05, 0.1])
    epsilons: ty.List[int] = field(factory=list)
    chips: int = DEFAULT_CHIPS
    restarts: int = 16
    delta: float = 0.01


@define
class ExperimentSpec:
    name: str = 'experiment'
    seed: int = 0
    architecture: dict = field(factory=lambda: {'name': 'simplenet', 'preset': 'mnist-half'})
    data: DataSpec = field(factory=DataSpec)
    train: training.TrainConfig = field(factory=training.TrainConfig)
    eval: EvalSpec = field(factory=EvalSpec)
    out_dir: str = '.'

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'seed': self.seed,
            'architecture': dict(self.architecture),
            'data': attrs.asdict(self.data),
            'train': self.train.to_dict(),
            'eval': attrs.asdict(self.eval),
            'out_dir': self.out_dir,
        }


def experiment_from_dict(data: dict, base_dir: str = '.') -> ExperimentSpec:
    data = dict(data)
    seed = data.get('seed', 0)
    train_section = dict(data.pop('train', None) or {})
    train_section.setdefault('seed', seed)
    data_section = dict(data.pop('data', None) or {})
    data_section.setdefault('seed', seed)
    if data_section.get('path'):
        data_section['path'] = os.path.join(base_dir, data_section['path'])
    clip = train_section.get('clip') or {}
    if clip.get('reference'):
        train_section['clip'] = dict(clip, reference=os.path.join(base_dir, clip['reference']))

    data['train'] = train_from_dict(train_section)
    data['data'] = _construct(DataSpec, data_section, 'data')
    data['eval'] = _construct(EvalSpec, data.pop('eval', None), 'eval')
    data['out_dir'] = os.path.join(base_dir, data.get('out_dir', '.'))
    return _construct(ExperimentSpec, data, 'experiment')


def load_config(path: str) -> ExperimentSpec:
    if not os.path.isfile(path):
        raise exceptions.ConfigurationException('Config file not found: {}'.format(path))
    with open(path, 'r') as f:
        try:
            data = json.load(f)
        except ValueError as e:
            raise exceptions.ConfigurationException('Could not parse config {}: {}'.format(path, e))
    if not isinstance(data, dict):
        raise exceptions.ConfigurationException('Config {} must hold a JSON object'.format(path))
    return experiment_from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))


# Flags that may override a scalar field, and every place that field lives
OVERRIDES = {
    'seed': (('seed',), ('train', 'seed'), ('data', 'seed')),
    'out_dir': (('out_dir',),),
    'regime': (('train', 'regime'),),
    'p': (('train', 'p'),),
    'epochs': (('train', 'sgd', 'epochs'),),
    'lr0': (('train', 'sgd', 'lr0'),),
    'batch_size': (('train', 'sgd', 'batch_size'),),
    'epsilon': (('train', 'attack', 'epsilon'),),
    'train_examples': (('data', 'train_examples'),),
    'test_examples': (('data', 'test_examples'),),
    'data_path': (('data', 'path'),),
}


def apply_overrides(record, **values):
    """Return a copy of an ExperimentSpec with the named scalar fields replaced; None values are ignored"""
    for key, value in values.items():
        if value is None:
            continue
        if key not in OVERRIDES:
            raise exceptions.ConfigurationException('Unknown override: {}'.format(key))
        for path in OVERRIDES[key]:
            record = _set_path(record, path, value)
    return record


def _set_path(record, path: ty.Sequence[str], value):
    head = path[0]
    if len(path) == 1:
        return attrs.evolve(record, **{head: value})
    return attrs.evolve(record, **{head: _set_path(getattr(record, head), path[1:], value)})
