"""
Layer graph for SimpleNet-style classifiers: conv / fully-connected / group-norm / relu / pooling

Parameters live in plain numpy arrays owned by each layer. Every forward pass wraps them in fresh `Tensor` leaves,
    so a pass that substitutes other values (de-quantized or bit-error-perturbed weights) never touches the stored
    parameters.
"""
import collections
import copy
import logging
import typing as ty

from attrs import define, field
import numpy as np

from . import exceptions, tensor as T
from .const import GN_DEFAULT_GROUPS, GN_EPS


logger = logging.getLogger(__name__)


LAYER_KINDS = ('conv2d', 'linear', 'group_norm', 'relu', 'max_pool', 'avg_pool', 'flatten')

PARAM_NAMES = {
    'conv2d': ('weight', 'bias'),
    'linear': ('weight', 'bias'),
    'group_norm': ('scale', 'bias'),
}

# Output channels per stage of the MNIST SimpleNet; every stage but the last ends in a 2x2 max pool, the last in a
#   global average pool.
SIMPLENET_MNIST = ((32, 64, 64, 64), (64, 64, 128), (256, 1024, 128), (128,))
SIMPLENET_MNIST_HALF = ((16, 32, 32, 32), (32, 32, 64), (128, 512, 64), (64,))


class Layer:
    """One node of the network, holding its own parameters (if any) and kind-specific hyper-parameters"""
    __slots__ = ('kind', 'name', 'params', 'hyper', 'block_end')

    def __init__(self, kind: str, name: str, params: dict = None, hyper: dict = None, block_end: bool = False):
        if kind not in LAYER_KINDS:
            raise exceptions.ConfigurationException('Unknown layer kind: {}'.format(kind))
        self.kind = kind
        self.name = name
        self.params = params or {}  # type: ty.Dict[str, np.ndarray]
        self.hyper = hyper or {}  # type: dict
        # Marks the end of a conv + norm + relu block; activation hooks run here
        self.block_end = block_end

        if kind == 'group_norm' and self.hyper['channels'] % self.hyper['groups']:
            raise exceptions.ConfigurationException(
                'Layer {}: {} channels are not divisible by {} groups'.format(
                    name, self.hyper['channels'], self.hyper['groups']))

    def to_dict(self) -> dict:
        return {
            'kind': self.kind,
            'name': self.name,
            'hyper': dict(self.hyper),
            'block_end': self.block_end,
            'params': {k: list(v.shape) for k, v in self.params.items()},
        }

    def __repr__(self):
        return 'Layer({}, {})'.format(self.kind, self.name)


class Network:
    def __init__(self, layers: ty.List[Layer], input_shape: ty.Sequence[int], num_classes: int,
                 architecture: dict = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        # Optional builder recipe, persisted with checkpoints for reference
        self.architecture = architecture or {}

        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise exceptions.ConfigurationException('Layer names must be unique')

    ######
    # Parameter bookkeeping
    def _iter_params(self) -> ty.Iterator[ty.Tuple[str, Layer, str]]:
        for layer in self.layers:
            for pname in PARAM_NAMES.get(layer.kind, ()):
                yield '{}.{}'.format(layer.name, pname), layer, pname

    @property
    def param_index(self) -> ty.List[ty.Tuple[str, tuple]]:
        """Ordered (name, shape) pairs; weights and biases are listed as separate entries"""
        return [(name, layer.params[pname].shape) for name, layer, pname in self._iter_params()]

    @property
    def param_names(self) -> ty.List[str]:
        return [name for name, _, _ in self._iter_params()]

    def parameters(self) -> 'collections.OrderedDict[str, np.ndarray]':
        """Live references to the stored arrays, in param_index order"""
        return collections.OrderedDict((name, layer.params[pname]) for name, layer, pname in self._iter_params())

    def load_parameters(self, values: ty.Mapping[str, np.ndarray]):
        """Overwrite stored parameters in place. Every entry of param_index must be present."""
        for name, layer, pname in self._iter_params():
            if name not in values:
                raise exceptions.CheckpointException('Missing parameter: {}'.format(name))
            value = np.asarray(values[name])
            if value.shape != layer.params[pname].shape:
                raise exceptions.ShapeException(
                    'Parameter {} has shape {}, expected {}'.format(name, value.shape, layer.params[pname].shape),
                    layer=layer.name)
            layer.params[pname][...] = value

    @property
    def n_weights(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.param_index))

    @property
    def dtype(self):
        for _, layer, pname in self._iter_params():
            return layer.params[pname].dtype
        return T.DEFAULT_DTYPE

    def clone(self) -> 'Network':
        return copy.deepcopy(self)

    def astype(self, dtype) -> 'Network':
        other = self.clone()
        for _, layer, pname in other._iter_params():
            layer.params[pname] = layer.params[pname].astype(dtype)
        return other

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise exceptions.ConfigurationException('No layer named {}'.format(name))

    def layer_names(self, kind: str) -> ty.List[str]:
        return [layer.name for layer in self.layers if layer.kind == kind]

    def describe(self) -> dict:
        return {
            'input_shape': list(self.input_shape),
            'num_classes': self.num_classes,
            'builder': self.architecture,
            'layers': [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_description(cls, description: dict, dtype=T.DEFAULT_DTYPE) -> 'Network':
        """Rebuild the layer graph with zero-valued parameters; values are loaded separately"""
        try:
            layers = [
                Layer(spec['kind'], spec['name'],
                      params={k: np.zeros(shape, dtype=dtype) for k, shape in spec['params'].items()},
                      hyper=spec['hyper'], block_end=spec['block_end'])
                for spec in description['layers']
            ]
            return cls(layers, description['input_shape'], description['num_classes'],
                       architecture=description.get('builder'))
        except KeyError as e:
            raise exceptions.CheckpointException('Architecture description is missing field {}'.format(e))


@define
class LossConfig:
    label_smoothing: float = field(default=0.0)

    @label_smoothing.validator
    def _check(self, attribute, value):
        if not 0 <= value < 1:
            raise exceptions.RangeException('label_smoothing must lie in [0, 1)')


Hook = ty.Callable[[int, T.Tensor], T.Tensor]


def _resolve_params(net: Network, param_override, track: bool) -> ty.Dict[str, T.Tensor]:
    leaves = {}
    for name, layer, pname in net._iter_params():
        stored = layer.params[pname]
        value = stored
        if param_override is not None and name in param_override:
            value = param_override[name]
            value = value.data if isinstance(value, T.Tensor) else np.asarray(value)
            if value.shape != stored.shape:
                raise exceptions.ShapeException(
                    'Override for {} has shape {}, expected {}'.format(name, value.shape, stored.shape),
                    layer=layer.name)
            value = value.astype(stored.dtype, copy=False)
        leaves[name] = T.Tensor(value, requires_grad=track, name=name)
    return leaves


def _apply(layer: Layer, x: T.Tensor, leaves: ty.Dict[str, T.Tensor]) -> T.Tensor:
    def p(pname):
        return leaves['{}.{}'.format(layer.name, pname)]

    kind = layer.kind
    if kind == 'conv2d':
        return T.conv2d(x, p('weight'), p('bias'),
                        stride=layer.hyper.get('stride', 1), padding=layer.hyper.get('padding', 0))
    elif kind == 'linear':
        return T.linear(x, p('weight'), p('bias'))
    elif kind == 'group_norm':
        return T.group_norm(x, p('scale'), p('bias'), layer.hyper['groups'], eps=layer.hyper.get('eps', GN_EPS))
    elif kind == 'relu':
        return T.relu(x)
    elif kind == 'max_pool':
        return T.max_pool2d(x, layer.hyper.get('size', 2))
    elif kind == 'avg_pool':
        return T.global_avg_pool(x)
    else:
        return T.flatten(x)


def _run(net: Network, x, param_override, hooks, track: bool):
    data = x.data if isinstance(x, T.Tensor) else np.asarray(x)
    data = data.astype(net.dtype, copy=False)
    if data.ndim < 1 or tuple(data.shape[1:]) != net.input_shape:
        raise exceptions.ShapeException(
            'Input of shape {} does not match network input {}'.format(data.shape, net.input_shape),
            layer=net.layers[0].name if net.layers else None)

    leaves = _resolve_params(net, param_override, track)
    out = T.Tensor(data)
    first_bad = None
    block = 0
    for layer in net.layers:
        try:
            out = _apply(layer, out, leaves)
        except exceptions.ShapeException as e:
            if e.layer is None:
                e.layer = layer.name
            raise
        if track and first_bad is None and not np.isfinite(out.data).all():
            first_bad = layer.name
        if layer.block_end and hooks:
            for hook in hooks:
                out = hook(block, out)
            block += 1
    return out, leaves, first_bad


def forward(net: Network, x, param_override: ty.Mapping = None, hooks: ty.Sequence[Hook] = None) -> T.Tensor:
    """
    Compute logits for a batch.

    :param param_override: Values to use instead of the stored parameters, keyed by param_index name. Stored
        parameters are left untouched.
    :param hooks: Callables `(block_index, activation) -> activation` run after every marked block
    """
    logits, _, _ = _run(net, x, param_override, hooks, track=False)
    return logits


def backward(net: Network, x, y, loss_cfg: LossConfig = None, param_override: ty.Mapping = None,
             hooks: ty.Sequence[Hook] = None) -> ty.Tuple['collections.OrderedDict[str, np.ndarray]', float]:
    """Mean cross-entropy loss over the batch and its gradient for every entry of param_index"""
    loss_cfg = loss_cfg or LossConfig()
    logits, leaves, first_bad = _run(net, x, param_override, hooks, track=True)
    loss = T.cross_entropy(logits, y, smoothing=loss_cfg.label_smoothing)
    value = loss.item()
    if not np.isfinite(value):
        raise exceptions.NumericException('Non-finite loss (first non-finite output in layer {})'.format(
            first_bad or 'loss'), layer=first_bad or 'loss')

    loss.backward()
    grads = collections.OrderedDict()
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads, value


def predict(net: Network, x: np.ndarray, param_override: ty.Mapping = None, hooks: ty.Sequence[Hook] = None,
            batch_size: int = 500) -> np.ndarray:
    """Logits for a whole array of inputs, computed in batches"""
    chunks = [forward(net, x[i:i + batch_size], param_override=param_override, hooks=hooks).data
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, net.num_classes))


def scale_block(net: Network, conv_name: str, factor: float) -> Network:
    """
    Return a copy where one convolution's weight and bias are multiplied by `factor`.

    When the convolution feeds a group norm layer the network function does not change.
    """
    if factor <= 0:
        raise exceptions.RangeException('Scale factor must be positive')
    layer = net.layer(conv_name)
    if layer.kind != 'conv2d':
        raise exceptions.ConfigurationException('{} is not a convolution'.format(conv_name))
    other = net.clone()
    target = other.layer(conv_name)
    for pname in PARAM_NAMES['conv2d']:
        target.params[pname] *= factor
    return other


######
# Builders
def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def group_count(channels: int, groups: int = GN_DEFAULT_GROUPS) -> int:
    """The largest divisor of `channels` that does not exceed `groups`"""
    for g in range(min(groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def simplenet(stages: ty.Sequence[ty.Sequence[int]] = SIMPLENET_MNIST_HALF, in_channels: int = 1,
              input_size: int = 28, num_classes: int = 10, groups: int = GN_DEFAULT_GROUPS, seed: int = 0,
              dtype=T.DEFAULT_DTYPE) -> Network:
    """
    Conv(3x3) + GN + ReLU blocks grouped into stages. Every stage but the last ends in a 2x2 max pool; the last
        ends in a global average pool followed by the classifier.
    """
    if not stages or not all(stages):
        raise exceptions.ConfigurationException('Every stage needs at least one convolution')
    rng = np.random.default_rng(seed)
    layers = []
    channels = in_channels
    size = input_size
    n = 0
    for s, stage in enumerate(stages):
        for width in stage:
            n += 1
            layers.append(Layer('conv2d', 'conv{}'.format(n), params={
                'weight': he_normal(rng, (width, channels, 3, 3), channels * 9, dtype),
                'bias': np.zeros(width, dtype=dtype),
            }, hyper={'stride': 1, 'padding': 1}))
            layers.append(Layer('group_norm', 'gn{}'.format(n), params={
                'scale': np.zeros(width, dtype=dtype),
                'bias': np.zeros(width, dtype=dtype),
            }, hyper={'groups': group_count(width, groups), 'channels': width, 'eps': GN_EPS}))
            layers.append(Layer('relu', 'relu{}'.format(n), block_end=True))
            channels = width
        if s < len(stages) - 1:
            size //= 2
            if size < 1:
                raise exceptions.ConfigurationException('Too many pooling stages for input size {}'.format(input_size))
            layers.append(Layer('max_pool', 'pool{}'.format(s + 1), hyper={'size': 2}))
        else:
            layers.append(Layer('avg_pool', 'gap'))
    layers.append(Layer('linear', 'logits', params={
        'weight': he_normal(rng, (num_classes, channels), channels, dtype),
        'bias': np.zeros(num_classes, dtype=dtype),
    }))
    architecture = {'name': 'simplenet', 'stages': [list(s) for s in stages], 'in_channels': in_channels,
                    'input_size': input_size, 'num_classes': num_classes, 'groups': groups, 'seed': seed}
    net = Network(layers, (in_channels, input_size, input_size), num_classes, architecture=architecture)
    logger.debug('Built simplenet with {} parameters'.format(net.n_weights))
    return net


def mlp(in_shape: ty.Sequence[int], hidden: ty.Sequence[int], num_classes: int = 10, seed: int = 0,
        dtype=T.DEFAULT_DTYPE) -> Network:
    """Flatten followed by fully connected + ReLU layers and a linear classifier"""
    rng = np.random.default_rng(seed)
    layers = [Layer('flatten', 'flatten')]
    features = int(np.prod(in_shape))
    for i, width in enumerate(hidden):
        layers.append(Layer('linear', 'fc{}'.format(i + 1), params={
            'weight': he_normal(rng, (width, features), features, dtype),
            'bias': np.zeros(width, dtype=dtype),
        }))
        layers.append(Layer('relu', 'relu{}'.format(i + 1), block_end=True))
        features = width
    layers.append(Layer('linear', 'logits', params={
        'weight': he_normal(rng, (num_classes, features), features, dtype),
        'bias': np.zeros(num_classes, dtype=dtype),
    }))
    architecture = {'name': 'mlp', 'in_shape': list(in_shape), 'hidden': list(hidden), 'num_classes': num_classes,
                    'seed': seed}
    return Network(layers, tuple(in_shape), num_classes, architecture=architecture)


def build(architecture: dict, dtype=T.DEFAULT_DTYPE) -> Network:
    """Construct a network from a builder recipe as stored in configs and checkpoints"""
    spec = dict(architecture)
    name = spec.pop('name', 'simplenet')
    try:
        if name == 'simplenet':
            preset = spec.pop('preset', None)
            if preset is not None:
                spec['stages'] = {'mnist': SIMPLENET_MNIST, 'mnist-half': SIMPLENET_MNIST_HALF}[preset]
            return simplenet(dtype=dtype, **spec)
        elif name == 'mlp':
            return mlp(dtype=dtype, **spec)
    except (TypeError, KeyError) as e:
        raise exceptions.ConfigurationException('Invalid architecture for {}: {}'.format(name, e))
    raise exceptions.ConfigurationException('Unknown architecture: {}'.format(name))


def error_rate(net: Network, x: np.ndarray, y: np.ndarray, param_override: ty.Mapping = None,
               hooks: ty.Sequence[Hook] = None, batch_size: int = 500) -> float:
    """Fraction of misclassified examples"""
    if len(y) == 0:
        raise exceptions.ConfigurationException('Cannot compute an error rate on an empty dataset')
    logits = predict(net, x, param_override=param_override, hooks=hooks, batch_size=batch_size)
    return float(np.mean(logits.argmax(axis=1) != np.asarray(y)))
