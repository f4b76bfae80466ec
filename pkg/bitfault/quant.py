"""
Fixed-point quantization of parameter tensors into m-bit codes held in 8-bit storage words

Every combination of granularity (global / per-layer), range (symmetric / asymmetric), integer representation
    (two's complement / unsigned) and rounding (truncation / nearest) is supported. With h = 2^(m-1) - 1:

    symmetric:   s = w / D,  D = qmax / h
    asymmetric:  s = h * (2 (w - qmin) / (qmax - qmin) - 1)
    r = trunc(s) or rint(s), clamped to [-h, h]
    signed word = r mod 2^m;  unsigned word = r + h

Decoding inverts the same affine map and never clamps, so words that are only reachable through bit errors
    (eg. unsigned 2^m - 1) decode to values outside the quantization range.
"""
import collections
import typing as ty

from attrs import define, field, asdict
import numpy as np

from . import exceptions
from .const import DEGENERATE_RANGE_PAD, GRID_SNAP, STORAGE_BITS


GRANULARITIES = ('global', 'per-layer')
RANGES = ('symmetric', 'asymmetric')
INTEGER_REPRS = ('signed', 'unsigned')
ROUNDINGS = ('floor', 'nearest')


def _one_of(choices):
    def check(instance, attribute, value):
        if value not in choices:
            raise exceptions.ConfigurationException(
                '{} must be one of {}, not {}'.format(attribute.name, ', '.join(choices), value))
    return check


def _bits(instance, attribute, value):
    if not 2 <= value <= STORAGE_BITS:
        raise exceptions.ConfigurationException('m must lie in [2, {}]'.format(STORAGE_BITS))


@define(frozen=True)
class QuantScheme:
    m: int = field(default=8, validator=_bits)
    granularity: str = field(default='per-layer', validator=_one_of(GRANULARITIES))
    range: str = field(default='asymmetric', validator=_one_of(RANGES))
    integer_repr: str = field(default='unsigned', validator=_one_of(INTEGER_REPRS))
    rounding: str = field(default='nearest', validator=_one_of(ROUNDINGS))

    @property
    def half(self) -> int:
        return 2 ** (self.m - 1) - 1

    @property
    def mask(self) -> int:
        return (1 << self.m) - 1

    def to_dict(self) -> dict:
        return asdict(self)


def rquant(m: int = 8) -> QuantScheme:
    """Per-layer, asymmetric, unsigned, nearest rounding"""
    return QuantScheme(m=m)


def normal(m: int = 8) -> QuantScheme:
    """Per-layer, symmetric, two's complement, truncation: the common baseline"""
    return QuantScheme(m=m, range='symmetric', integer_repr='signed', rounding='floor')


def to_signed(words, bits: int):
    """Interpret the low `bits` bits of each word as a two's complement integer"""
    words = np.asarray(words).astype(np.int64) & ((1 << bits) - 1)
    return np.where(words >= (1 << (bits - 1)), words - (1 << bits), words)


def to_unsigned(values, bits: int):
    """Two's complement encoding of signed integers into the low `bits` bits"""
    return np.asarray(values).astype(np.int64) & ((1 << bits) - 1)


def _widen(lo: float, hi: float, scheme: QuantScheme) -> ty.Tuple[float, float]:
    if scheme.range == 'symmetric':
        hi = max(abs(lo), abs(hi))
        if hi <= 0:
            hi = DEGENERATE_RANGE_PAD
        return -hi, hi
    if hi - lo <= 0:
        lo, hi = lo - DEGENERATE_RANGE_PAD, hi + DEGENERATE_RANGE_PAD
    return lo, hi


def compute_ranges(weights: ty.Mapping[str, np.ndarray],
                   scheme: QuantScheme) -> 'collections.OrderedDict[str, ty.Tuple[float, float]]':
    """(qmin, qmax) per tensor from current extrema; symmetric ranges are stored as (-qmax, qmax)"""
    extrema = collections.OrderedDict()
    for name, w in weights.items():
        w = np.asarray(w)
        if not np.isfinite(w).all():
            raise exceptions.NumericException('Cannot quantize non-finite values in {}'.format(name),
                                              layer=name.split('.')[0])
        extrema[name] = (float(w.min()), float(w.max())) if w.size else (0.0, 0.0)

    if scheme.granularity == 'global' and extrema:
        lo = min(v[0] for v in extrema.values())
        hi = max(v[1] for v in extrema.values())
        shared = _widen(lo, hi, scheme)
        return collections.OrderedDict((name, shared) for name in extrema)
    return collections.OrderedDict((name, _widen(lo, hi, scheme)) for name, (lo, hi) in extrema.items())


def step_size(scheme: QuantScheme, lo, hi):
    """Distance between adjacent codes, in weight units"""
    if scheme.range == 'symmetric':
        return np.asarray(hi, dtype=np.float64) / scheme.half
    return (np.asarray(hi, dtype=np.float64) - lo) / (2 * scheme.half)


def encode(values, scheme: QuantScheme, lo, hi) -> np.ndarray:
    """Map float values onto storage words, given (broadcastable) range bounds"""
    values = np.asarray(values, dtype=np.float64)
    half = scheme.half
    if scheme.range == 'symmetric':
        s = values * (half / np.asarray(hi, dtype=np.float64))
    else:
        s = ((values - lo) / (np.asarray(hi, dtype=np.float64) - lo) * 2.0 - 1.0) * half
    nearest = np.rint(s)
    if scheme.rounding == 'nearest':
        r = nearest
    else:
        r = np.where(np.abs(s - nearest) < GRID_SNAP, nearest, np.trunc(s))
    r = np.clip(r, -half, half).astype(np.int64)
    if scheme.integer_repr == 'signed':
        words = to_unsigned(r, scheme.m)
    else:
        words = r + half
    return words.astype(np.uint8)


def decode(words, scheme: QuantScheme, lo, hi) -> np.ndarray:
    """Inverse of `encode`, applied to any m-bit word (no clamping)"""
    words = np.asarray(words)
    half = scheme.half
    if scheme.integer_repr == 'signed':
        r = to_signed(words, scheme.m)
    else:
        r = (words.astype(np.int64) & scheme.mask) - half
    r = r.astype(np.float64)
    if scheme.range == 'symmetric':
        return r * (np.asarray(hi, dtype=np.float64) / half)
    return (r / half + 1.0) * 0.5 * (np.asarray(hi, dtype=np.float64) - lo) + lo


class QuantizedParams:
    """Per-tensor code words (uint8, high 8 - m bits zero) with the ranges needed to decode them"""
    __slots__ = ('codes', 'ranges', 'scheme', 'dtype')

    def __init__(self, codes: ty.Mapping[str, np.ndarray], ranges: ty.Mapping[str, ty.Tuple[float, float]],
                 scheme: QuantScheme, dtype=np.float32):
        if list(codes) != list(ranges):
            raise exceptions.ConfigurationException('Codes and ranges must list the same tensors in the same order')
        self.codes = collections.OrderedDict(codes)  # type: collections.OrderedDict
        self.ranges = collections.OrderedDict(ranges)  # type: collections.OrderedDict
        self.scheme = scheme
        self.dtype = np.dtype(dtype)

    @property
    def names(self) -> ty.List[str]:
        return list(self.codes)

    @property
    def n_weights(self) -> int:
        return int(sum(c.size for c in self.codes.values()))

    def copy(self) -> 'QuantizedParams':
        return self.with_codes({k: v.copy() for k, v in self.codes.items()})

    def with_codes(self, codes: ty.Mapping[str, np.ndarray]) -> 'QuantizedParams':
        return QuantizedParams(codes, self.ranges, self.scheme, self.dtype)

    def flat_codes(self) -> np.ndarray:
        """All words concatenated in param_index order"""
        if not self.codes:
            return np.zeros(0, dtype=np.uint8)
        return np.concatenate([c.ravel() for c in self.codes.values()])

    def from_flat(self, flat: np.ndarray) -> 'QuantizedParams':
        codes = collections.OrderedDict()
        start = 0
        for name, c in self.codes.items():
            codes[name] = np.asarray(flat[start:start + c.size], dtype=np.uint8).reshape(c.shape)
            start += c.size
        return self.with_codes(codes)

    def element_ranges(self) -> ty.Tuple[np.ndarray, np.ndarray]:
        """Per-word (qmin, qmax), aligned with `flat_codes`"""
        sizes = [c.size for c in self.codes.values()]
        lo = np.repeat([r[0] for r in self.ranges.values()], sizes).astype(np.float64)
        hi = np.repeat([r[1] for r in self.ranges.values()], sizes).astype(np.float64)
        return lo, hi

    def tensor_of(self) -> np.ndarray:
        """Index of the owning tensor for each flat word"""
        return np.repeat(np.arange(len(self.codes)), [c.size for c in self.codes.values()])

    def to_dict(self) -> dict:
        return {
            'scheme': self.scheme.to_dict(),
            'ranges': {name: [float(lo), float(hi)] for name, (lo, hi) in self.ranges.items()},
        }

    def __eq__(self, other):
        if not isinstance(other, QuantizedParams):
            return NotImplemented
        return (self.scheme == other.scheme and self.ranges == other.ranges
                and list(self.codes) == list(other.codes)
                and all(np.array_equal(a, other.codes[k]) for k, a in self.codes.items()))


def quantize(weights: ty.Mapping[str, np.ndarray], scheme: QuantScheme,
             ranges: ty.Mapping[str, ty.Tuple[float, float]] = None) -> QuantizedParams:
    """
    Quantize every tensor. Ranges come from the current extrema unless given explicitly (eg. to re-quantize
        perturbed weights against the ranges of the clean model).
    """
    if ranges is None:
        ranges = compute_ranges(weights, scheme)
    codes = collections.OrderedDict()
    dtype = np.float32
    for name, w in weights.items():
        w = np.asarray(w)
        dtype = w.dtype
        lo, hi = ranges[name]
        codes[name] = encode(w, scheme, lo, hi)
    return QuantizedParams(codes, collections.OrderedDict((k, tuple(ranges[k])) for k in weights), scheme, dtype)


def dequantize(q: QuantizedParams) -> 'collections.OrderedDict[str, np.ndarray]':
    return collections.OrderedDict(
        (name, decode(c, q.scheme, *q.ranges[name]).astype(q.dtype)) for name, c in q.codes.items())


def fake_quantize(weights: ty.Mapping[str, np.ndarray], scheme: QuantScheme,
                  ranges: ty.Mapping[str, ty.Tuple[float, float]] = None) -> 'collections.OrderedDict[str, np.ndarray]':
    return dequantize(quantize(weights, scheme, ranges))


def signal_to_noise_db(reference: ty.Mapping[str, np.ndarray], perturbed: ty.Mapping[str, np.ndarray]) -> float:
    """10 log10(E[w^2] / E[(w' - w)^2]) over all tensors jointly; infinite when nothing changed"""
    signal = 0.0
    noise = 0.0
    for name, w in reference.items():
        w = np.asarray(w, dtype=np.float64)
        signal += float(np.sum(w ** 2))
        noise += float(np.sum((np.asarray(perturbed[name], dtype=np.float64) - w) ** 2))
    if noise == 0:
        return float('inf')
    return float(10 * np.log10(signal / noise))
