"""Test fixed-point quantization schemes"""

import itertools

import numpy as np
import pytest

from bitfault import exceptions, quant


SCHEMES = [
    quant.QuantScheme(m=m, granularity=g, range=r, integer_repr=i, rounding=o)
    for m, g, r, i, o in itertools.product((2, 3, 4, 8), quant.GRANULARITIES, quant.RANGES, quant.INTEGER_REPRS,
                                          quant.ROUNDINGS)
]


def scheme_id(scheme):
    return '{}-{}-{}-{}-{}'.format(scheme.m, scheme.granularity, scheme.range, scheme.integer_repr, scheme.rounding)


@pytest.fixture(scope='module')
def weights():
    rng = np.random.default_rng(11)
    return {
        'a.weight': rng.standard_normal((6, 5)) * 0.3,
        'a.bias': rng.uniform(0.1, 0.4, size=7),
        'b.weight': rng.standard_normal(40) * 2.0,
    }


class TestRoundTrip:
    @pytest.mark.parametrize('scheme', SCHEMES, ids=scheme_id)
    def test_error_within_one_step(self, scheme, weights):
        q = quant.quantize(weights, scheme)
        restored = quant.dequantize(q)
        for name, w in weights.items():
            lo, hi = q.ranges[name]
            step = quant.step_size(scheme, lo, hi)
            limit = step / 2 if scheme.rounding == 'nearest' else step
            assert np.abs(restored[name] - w).max() <= limit + 1e-12, name

    @pytest.mark.parametrize('scheme', SCHEMES, ids=scheme_id)
    def test_only_low_bits_are_used(self, scheme, weights):
        q = quant.quantize(weights, scheme)
        assert q.flat_codes().max() <= scheme.mask
        assert q.flat_codes().dtype == np.uint8

    @pytest.mark.parametrize('scheme', [s for s in SCHEMES if s.range == 'symmetric'], ids=scheme_id)
    def test_symmetric_zero_is_exact(self, scheme):
        q = quant.quantize({'w': np.array([-1.0, 0.0, 0.5])}, scheme)
        assert quant.dequantize(q)['w'][1] == 0.0

    @pytest.mark.parametrize('scheme', [s for s in SCHEMES if s.range == 'asymmetric' and s.rounding == 'nearest'],
                             ids=scheme_id)
    def test_asymmetric_extremes_are_exact(self, scheme):
        w = np.array([-0.2, 0.05, 0.7])
        restored = quant.fake_quantize({'w': w}, scheme)['w']
        assert restored[0] == pytest.approx(-0.2)
        assert restored[2] == pytest.approx(0.7)


class TestRanges:
    def test_global_ranges_are_shared(self, weights):
        ranges = quant.compute_ranges(weights, quant.QuantScheme(granularity='global'))
        assert len(set(ranges.values())) == 1
        lo, hi = ranges['a.weight']
        assert lo == min(w.min() for w in weights.values())
        assert hi == max(w.max() for w in weights.values())

    def test_symmetric_range_is_the_largest_magnitude(self):
        ranges = quant.compute_ranges({'w': np.array([-0.5, 0.2])}, quant.normal())
        assert ranges['w'] == (-0.5, 0.5)

    def test_constant_tensor_is_widened(self):
        q = quant.quantize({'w': np.full(4, 0.3)}, quant.rquant())
        lo, hi = q.ranges['w']
        assert lo < 0.3 < hi
        assert quant.dequantize(q)['w'] == pytest.approx(np.full(4, 0.3))

    def test_non_finite_weights(self):
        with pytest.raises(exceptions.NumericException, match='non-finite values in conv3.weight') as e:
            quant.compute_ranges({'conv3.weight': np.array([0.0, np.nan])}, quant.rquant())
        assert e.value.layer == 'conv3'


class TestWords:
    def test_twos_complement(self):
        assert quant.to_signed(np.array([0, 127, 128, 255]), 8).tolist() == [0, 127, -128, -1]
        assert quant.to_unsigned(np.array([-1, -128, 5]), 8).tolist() == [255, 128, 5]
        assert quant.to_signed(np.array([3, 4]), 3).tolist() == [3, -4]

    def test_unsigned_offset(self):
        scheme = quant.rquant(8)
        words = quant.encode(np.array([-1.0, 0.0, 1.0]), scheme, -1.0, 1.0)
        assert words.tolist() == [0, 127, 254]

    def test_unreachable_words_decode_outside_the_range(self):
        scheme = quant.rquant(8)
        assert quant.decode(np.array([255]), scheme, -1.0, 1.0)[0] > 1.0

    def test_signed_codes_flip_sign_through_the_top_bit(self):
        scheme = quant.normal(8)
        words = quant.encode(np.array([-0.5]), scheme, -1.0, 1.0)
        assert words[0] >= 128

    def test_scheme_validation(self):
        with pytest.raises(exceptions.ConfigurationException, match='m must lie in'):
            quant.QuantScheme(m=1)
        with pytest.raises(exceptions.ConfigurationException, match='m must lie in'):
            quant.QuantScheme(m=9)
        with pytest.raises(exceptions.ConfigurationException, match='rounding must be one of'):
            quant.QuantScheme(rounding='stochastic')

    def test_presets(self):
        assert quant.rquant() == quant.QuantScheme(8, 'per-layer', 'asymmetric', 'unsigned', 'nearest')
        assert quant.normal(4) == quant.QuantScheme(4, 'per-layer', 'symmetric', 'signed', 'floor')


class TestQuantizedParams:
    def test_flat_codes_follow_tensor_order(self, weights):
        q = quant.quantize(weights, quant.rquant())
        flat = q.flat_codes()
        assert flat.size == q.n_weights == 30 + 7 + 40
        assert np.array_equal(flat[:30], q.codes['a.weight'].ravel())
        assert q.from_flat(flat) == q
        assert q.tensor_of()[30] == 1

    def test_copy_is_independent(self, weights):
        q = quant.quantize(weights, quant.rquant())
        other = q.copy()
        other.codes['a.bias'][0] ^= 1
        assert other != q

    def test_requantizing_against_fixed_ranges(self, weights):
        q = quant.quantize(weights, quant.rquant())
        again = quant.quantize(quant.dequantize(q), quant.rquant(), ranges=q.ranges)
        assert again == q

    def test_codes_and_ranges_must_match(self):
        with pytest.raises(exceptions.ConfigurationException, match='same tensors'):
            quant.QuantizedParams({'a': np.zeros(1, dtype=np.uint8)}, {'b': (0.0, 1.0)}, quant.rquant())


class TestSignalToNoise:
    def test_unchanged_is_infinite(self):
        w = {'w': np.array([1.0, 2.0])}
        assert quant.signal_to_noise_db(w, w) == float('inf')

    def test_known_ratio(self):
        assert quant.signal_to_noise_db({'w': np.array([1.0, 1.0])},
                                        {'w': np.array([1.1, 0.9])}) == pytest.approx(20.0)


@pytest.fixture(scope='module')
def many_values():
    rng = np.random.default_rng(12)
    return {
        'a.weight': rng.standard_normal((50, 100)) * 0.2,
        'b.weight': rng.uniform(-0.05, 0.3, size=5000),
    }


class TestGridProperties:
    @pytest.mark.parametrize('scheme', SCHEMES, ids=scheme_id)
    def test_ten_thousand_values_within_one_step(self, scheme, many_values):
        assert sum(w.size for w in many_values.values()) == 10000
        q = quant.quantize(many_values, scheme)
        restored = quant.dequantize(q)
        for name, w in many_values.items():
            step = quant.step_size(scheme, *q.ranges[name])
            limit = step / 2 if scheme.rounding == 'nearest' else step
            assert np.abs(restored[name] - w).max() <= limit + 1e-12, name

    @pytest.mark.parametrize('scheme', [s for s in SCHEMES if s.rounding == 'nearest'], ids=scheme_id)
    def test_nearest_is_never_worse_than_floor(self, scheme, many_values):
        floor = quant.QuantScheme(scheme.m, scheme.granularity, scheme.range, scheme.integer_repr, 'floor')
        for name, w in many_values.items():
            nearest_error = np.abs(quant.fake_quantize({name: w}, scheme)[name] - w).max()
            floor_error = np.abs(quant.fake_quantize({name: w}, floor)[name] - w).max()
            assert nearest_error <= floor_error + 1e-12, name

    @pytest.mark.parametrize('scheme', SCHEMES, ids=scheme_id)
    def test_fake_quantize_is_idempotent_under_fixed_ranges(self, scheme, many_values):
        ranges = quant.compute_ranges(many_values, scheme)
        once = quant.fake_quantize(many_values, scheme, ranges)
        twice = quant.fake_quantize(once, scheme, ranges)
        for name in many_values:
            assert np.array_equal(once[name], twice[name]), name

    def test_float32_grid_points_keep_their_codes(self, many_values):
        weights = {name: w.astype(np.float32) for name, w in many_values.items()}
        q = quant.quantize(weights, quant.normal(8))
        again = quant.quantize(quant.dequantize(q), quant.normal(8), ranges=q.ranges)
        assert again == q
