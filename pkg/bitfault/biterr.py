"""
Bit error injection into stored code words, inputs and activations

A chip is a seed. The uniform value u for bit j of word i is a hash of (chip seed, i * m + j), so any part of the
    field can be regenerated on demand and the flipped set at a rate p' <= p is always a subset of the set at p.
    Bits are laid out in param_index order, least significant bit first within each word.
"""
import typing as ty
import zlib

from attrs import define, field
import numpy as np

from . import exceptions, quant, tensor as T
from .const import STORAGE_BITS, STREAM_CHIPS


MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Words per chunk when sweeping the field; bounds peak memory at CHUNK * m doubles
CHUNK = 1 << 18

TARGETS = ('weights', 'inputs', 'activations')
MODELS = ('uniform', 'profiled')


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: ty.Union[str, int]) -> int:
    """Split a seed into independent named streams, eg. derive_seed(7, 'bit-error', step)"""
    s = int(seed) & MASK64
    for key in keys:
        k = zlib.crc32(key.encode('utf8')) if isinstance(key, str) else int(key) & MASK64
        s = _mix_int((s ^ _mix_int((k + _GOLDEN) & MASK64)) + _GOLDEN & MASK64)
    return s


def uniform_field(seed: int, indices: np.ndarray) -> np.ndarray:
    """u in (0, 1) for each linear bit index; a pure function of (seed, index)"""
    key = np.uint64(_mix_int((int(seed) + _GOLDEN) & MASK64))
    with np.errstate(over='ignore'):
        z = np.asarray(indices).astype(np.uint64) * np.uint64(_GOLDEN) + key
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def _check_rate(p: float):
    if not 0 <= p <= 1:
        raise exceptions.RangeException('Bit error rate must lie in [0, 1], not {}'.format(p))


def flip_bit(word, j: int, m: int = STORAGE_BITS):
    """Flip bit j (0 = least significant) of an m-bit word"""
    if not 0 <= j < m:
        raise exceptions.RangeException('Bit index {} is outside of an {}-bit word'.format(j, m))
    if isinstance(word, np.ndarray):
        return word ^ word.dtype.type(1 << j)
    return word ^ (1 << j)


class ChipSample:
    """One realization of the uniform field, standing in for a physical memory instance"""
    __slots__ = ('chip_seed', 'n_bits')

    def __init__(self, chip_seed: int, n_bits: int = None):
        self.chip_seed = int(chip_seed) & MASK64
        # Informational: W * m of the layout this chip was drawn for
        self.n_bits = n_bits

    def uniform(self, indices: np.ndarray) -> np.ndarray:
        return uniform_field(self.chip_seed, indices)

    def flip_mask(self, p: float, n_words: int, m: int, start: int = 0) -> np.ndarray:
        """XOR masks for words [start, start + n_words)"""
        return _xor_masks(self.chip_seed, p, n_words, m, start)

    def __repr__(self):
        return 'ChipSample({})'.format(self.chip_seed)

    def __eq__(self, other):
        return isinstance(other, ChipSample) and self.chip_seed == other.chip_seed

    def __hash__(self):
        return hash(self.chip_seed)


def make_chips(count: int, seed: int = 0) -> ty.List[ChipSample]:
    """A fixed, reproducible set of chips; the same (count, seed) gives the same chips for every model"""
    return [ChipSample(derive_seed(seed, STREAM_CHIPS, i)) for i in range(count)]


def _xor_masks(seed: int, p: float, n_words: int, m: int, start: int = 0) -> np.ndarray:
    masks = np.zeros(n_words, dtype=np.uint8)
    if p <= 0 or n_words == 0:
        return masks
    weights = (1 << np.arange(m)).astype(np.uint8)
    for lo in range(0, n_words, CHUNK):
        hi = min(lo + CHUNK, n_words)
        words = np.arange(start + lo, start + hi, dtype=np.uint64)
        idx = words[:, None] * np.uint64(m) + np.arange(m, dtype=np.uint64)[None, :]
        flips = uniform_field(seed, idx) <= p
        masks[lo:hi] = (flips * weights).sum(axis=1, dtype=np.uint8)
    return masks


def flipped_positions(chip: ChipSample, p: float, n_words: int, m: int) -> np.ndarray:
    """Sorted linear bit indices (word * m + bit) that flip at rate p"""
    _check_rate(p)
    found = []
    for lo in range(0, n_words, CHUNK):
        hi = min(lo + CHUNK, n_words)
        idx = np.arange(lo * m, hi * m, dtype=np.uint64)
        found.append(np.flatnonzero(chip.uniform(idx) <= p) + lo * m)
    return np.concatenate(found) if found else np.zeros(0, dtype=np.int64)


def inject_random(q: quant.QuantizedParams, chip: ChipSample, p: float) -> quant.QuantizedParams:
    """Flip bit (i, j) iff u_ij <= p; only the low m bits of each word are eligible"""
    _check_rate(p)
    if p == 0:
        return q.copy()
    flat = q.flat_codes()
    flat ^= chip.flip_mask(p, flat.size, q.scheme.m)
    return q.from_flat(flat)


class ProfiledMap:
    """Per-cell 0-to-1 and 1-to-0 flip probabilities of a memory array"""
    __slots__ = ('p01', 'p10', 'p_sa', 'voltage_label')

    def __init__(self, p01: np.ndarray, p10: np.ndarray, p_sa: float = 0.0, voltage_label: str = ''):
        p01 = np.asarray(p01, dtype=np.float64)
        p10 = np.asarray(p10, dtype=np.float64)
        if p01.ndim != 2 or p01.size == 0:
            raise exceptions.ConfigurationException('Profiled map must be a non-empty matrix')
        if p01.shape != p10.shape:
            raise exceptions.ConfigurationException(
                'p01 and p10 maps differ in shape: {} vs {}'.format(p01.shape, p10.shape))
        for label, values in (('p01', p01), ('p10', p10)):
            bad = ~(np.isfinite(values) & (values >= 0) & (values <= 1))
            if bad.any():
                row, col = np.argwhere(bad)[0]
                raise exceptions.RangeException('{} value {} at row {}, column {} is not a probability'.format(
                    label, values[row, col], row, col))
        self.p01 = p01
        self.p10 = p10
        self.p_sa = float(p_sa)
        self.voltage_label = voltage_label

    @property
    def rows(self) -> int:
        return self.p01.shape[0]

    @property
    def cols(self) -> int:
        return self.p01.shape[1]

    @property
    def cells(self) -> int:
        return self.p01.size

    def mean_rate(self) -> float:
        """Average flip probability, assuming 0 and 1 are stored equally often"""
        return float((self.p01.mean() + self.p10.mean()) / 2)

    def to_meta(self) -> dict:
        return {'rows': self.rows, 'cols': self.cols, 'p_sa': self.p_sa, 'voltage_label': self.voltage_label}


def inject_profiled(q: quant.QuantizedParams, pmap: ProfiledMap, offset: int = 0, rng_seed: int = 0,
                    wrap: bool = True) -> quant.QuantizedParams:
    """
    Map bit k of the layout onto cell (offset + k) mod (rows * cols) and flip it with the cell's p10 if it currently
        stores 1, p01 if it stores 0.
    """
    if not 0 <= offset < pmap.cells:
        raise exceptions.RangeException('Offset {} is outside of a map with {} cells'.format(offset, pmap.cells))
    m = q.scheme.m
    flat = q.flat_codes()
    total = flat.size * m
    if not wrap and offset + total > pmap.cells:
        raise exceptions.ConfigurationException(
            'Map has {} cells but {} are required from offset {}'.format(pmap.cells, total, offset))

    p01 = pmap.p01.ravel()
    p10 = pmap.p10.ravel()
    bit_weights = (1 << np.arange(m)).astype(np.uint8)
    for lo in range(0, flat.size, CHUNK):
        hi = min(lo + CHUNK, flat.size)
        idx = np.arange(lo * m, hi * m, dtype=np.int64).reshape(hi - lo, m)
        cells = (idx + offset) % pmap.cells
        stored = (flat[lo:hi, None] >> np.arange(m, dtype=np.uint8)[None, :]) & 1
        prob = np.where(stored == 1, p10[cells], p01[cells])
        flips = uniform_field(rng_seed, idx) <= prob
        flat[lo:hi] ^= (flips * bit_weights).sum(axis=1, dtype=np.uint8)
    return q.from_flat(flat)


def inject_input(x, p: float, seed: int, offset: int = 0):
    """
    Quantize inputs in [0, 1] to 8 bits (b / 255), flip bits under the uniform model and de-quantize.

    `offset` is the linear index of the first value, so batches of one dataset draw from one field.
    """
    _check_rate(p)
    is_tensor = isinstance(x, T.Tensor)
    data = x.data if is_tensor else np.asarray(x)
    codes = np.rint(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)
    if p > 0:
        flat = codes.ravel()
        flat ^= _xor_masks(seed, p, flat.size, STORAGE_BITS, start=offset)
        codes = flat.reshape(data.shape)
    # Same arithmetic as the dataset readers, so p = 0 returns the input unchanged
    dtype = data.dtype if np.issubdtype(data.dtype, np.floating) else T.DEFAULT_DTYPE
    out = codes.astype(dtype) / 255
    return T.Tensor(out) if is_tensor else out


class ActivationBitErrors:
    """
    Forward hook: after each marked block, quantize the activation tensor with an m-bit RQuant scheme (range taken
        from the current batch), flip bits with a per-block seed, and de-quantize. Gradients pass straight through.
    """
    def __init__(self, p: float, seed: int, m: int = STORAGE_BITS, quantize: bool = True):
        _check_rate(p)
        self.p = p
        self.seed = seed
        self.scheme = quant.rquant(m)
        self.quantize = quantize

    def block_seed(self, block: int) -> int:
        return derive_seed(self.seed, 'activations', block)

    def perturb(self, block: int, values: np.ndarray) -> np.ndarray:
        ranges = quant.compute_ranges({'a': values}, self.scheme)
        lo, hi = ranges['a']
        words = quant.encode(values, self.scheme, lo, hi).ravel()
        if self.p > 0:
            words ^= _xor_masks(self.block_seed(block), self.p, words.size, self.scheme.m)
        return quant.decode(words.reshape(values.shape), self.scheme, lo, hi).astype(values.dtype)

    def __call__(self, block: int, activation: T.Tensor) -> T.Tensor:
        if not self.quantize and self.p == 0:
            return activation
        return T.straight_through(activation, lambda values: self.perturb(block, values))


def inject_activation_hook(p: float, seed: int, m: int = STORAGE_BITS) -> ActivationBitErrors:
    return ActivationBitErrors(p, seed, m=m)


def _one_of(choices):
    def check(instance, attribute, value):
        if value not in choices:
            raise exceptions.ConfigurationException(
                '{} must be one of {}, not {}'.format(attribute.name, ', '.join(choices), value))
    return check


def _rate(instance, attribute, value):
    _check_rate(value)


@define
class ErrorSpec:
    """Where errors go (weights, inputs or activations) and how they are drawn"""
    target: str = field(default='weights', validator=_one_of(TARGETS))
    model: str = field(default='uniform', validator=_one_of(MODELS))
    p: float = field(default=0.0, validator=_rate)
    chip: ty.Optional[ChipSample] = None
    pmap: ty.Optional[ProfiledMap] = None
    offset: int = 0

    def __attrs_post_init__(self):
        if self.model == 'profiled':
            if self.pmap is None:
                raise exceptions.ConfigurationException('A profiled error model needs a map')
            if self.target != 'weights':
                raise exceptions.ConfigurationException('Profiled maps apply to stored weights only')
        elif self.p > 0 and self.chip is None:
            raise exceptions.ConfigurationException('A uniform error model with p > 0 needs a chip')

    @property
    def is_noop(self) -> bool:
        return self.model == 'uniform' and self.p == 0

    def perturb_params(self, q: quant.QuantizedParams) -> quant.QuantizedParams:
        if self.target != 'weights' or self.is_noop:
            return q
        if self.model == 'profiled':
            return inject_profiled(q, self.pmap, offset=self.offset,
                                   rng_seed=self.chip.chip_seed if self.chip else 0)
        return inject_random(q, self.chip, self.p)

    def perturb_inputs(self, x, offset: int = 0):
        if self.target != 'inputs' or self.is_noop:
            return x
        return inject_input(x, self.p, self.chip.chip_seed, offset=offset)

    def hooks(self) -> ty.List[ActivationBitErrors]:
        if self.target != 'activations' or self.is_noop:
            return []
        return [ActivationBitErrors(self.p, self.chip.chip_seed)]
