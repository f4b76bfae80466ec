"""Test experiment configs: loading, path resolution and overrides"""

import json
import os

import pytest

from bitfault import config, exceptions, quant, storage, training


def write_config(tmpdir, data, name='experiment.json'):
    path = str(tmpdir / name)
    with open(path, 'w') as f:
        json.dump(data, f)
    return path


RANDBET = {
    'name': 'randbet-p1',
    'seed': 4,
    'architecture': {'name': 'mlp', 'hidden': [16]},
    'data': {'source': 'synthetic', 'synthetic_train': 50, 'synthetic_test': 20},
    'train': {'regime': 'randbet', 'p': 0.01, 'clip': {'mode': 'global', 'wmax': 0.1}, 'quant': 'rquant',
              'sgd': {'epochs': 2, 'batch_size': 25}},
    'eval': {'ps': [0.001, 0.01], 'chips': 5},
    'out_dir': 'runs',
}


class TestLoadConfig:
    def test_reads_every_section(self, tmpdir):
        spec = config.load_config(write_config(tmpdir, RANDBET))
        assert spec.name == 'randbet-p1'
        assert spec.train.regime == 'randbet'
        assert spec.train.quant == quant.rquant()
        assert spec.train.clip.bound('fc1.weight') == 0.1
        assert spec.train.sgd.epochs == 2
        assert spec.eval.ps == [0.001, 0.01]
        assert spec.data.source == 'synthetic'

    def test_top_level_seed_is_the_default_everywhere(self, tmpdir):
        spec = config.load_config(write_config(tmpdir, RANDBET))
        assert spec.train.seed == 4
        assert spec.data.seed == 4

    def test_paths_are_relative_to_the_config(self, tmpdir):
        data = dict(RANDBET, data={'source': 'mnist', 'path': 'mnist'})
        spec = config.load_config(write_config(tmpdir, data))
        assert spec.data.path == os.path.join(str(tmpdir), 'mnist')
        assert spec.out_dir == os.path.join(str(tmpdir), 'runs')

    def test_missing_file(self, tmpdir):
        with pytest.raises(exceptions.ConfigurationException, match='Config file not found'):
            config.load_config(str(tmpdir / 'missing.json'))

    def test_bad_json(self, tmpdir):
        path = str(tmpdir / 'bad.json')
        with open(path, 'w') as f:
            f.write('{"name": ')
        with pytest.raises(exceptions.ConfigurationException, match='Could not parse config'):
            config.load_config(path)

    def test_must_be_an_object(self, tmpdir):
        with pytest.raises(exceptions.ConfigurationException, match='must hold a JSON object'):
            config.load_config(write_config(tmpdir, [1, 2]))

    def test_unknown_keys_name_the_section(self, tmpdir):
        data = dict(RANDBET, eval={'chipz': 3})
        with pytest.raises(exceptions.ConfigurationException, match='Invalid eval section'):
            config.load_config(write_config(tmpdir, data))

    def test_invalid_values_are_rejected(self, tmpdir):
        data = dict(RANDBET, train=dict(RANDBET['train'], p=1.5))
        with pytest.raises(exceptions.ConfigurationException):
            config.load_config(write_config(tmpdir, data))

    def test_unknown_data_source(self, tmpdir):
        data = dict(RANDBET, data={'source': 'cifar'})
        with pytest.raises(exceptions.ConfigurationException, match='Unknown data source'):
            config.load_config(write_config(tmpdir, data))

    def test_round_trip(self, tmpdir):
        spec = config.load_config(write_config(tmpdir, RANDBET))
        assert config.experiment_from_dict(spec.to_dict()) == spec


class TestSections:
    def test_scheme_presets(self):
        assert config.scheme_from_dict('normal') == quant.normal()
        assert config.scheme_from_dict(None) is None
        assert config.scheme_from_dict({'m': 4}).m == 4

    def test_unknown_preset(self):
        with pytest.raises(exceptions.ConfigurationException, match='Unknown quantization preset'):
            config.scheme_from_dict('int4')

    def test_attack_section_extends_a_base(self):
        cfg = config.attack_from_dict({'epsilon': 7}, base=training.TrainConfig().attack)
        assert cfg.epsilon == 7
        assert cfg.iterations == training.TrainConfig().attack.iterations

    def test_clipping_from_a_reference_checkpoint(self, tmpdir, tiny_mlp):
        reference = str(tmpdir / 'reference')
        storage.save_checkpoint(reference, tiny_mlp)
        clip = config.clip_from_dict({'reference': reference, 'wmax': 0.2})
        assert clip.mode == 'per-layer'
        assert set(clip.kappa) == set(tiny_mlp.param_names)
        assert max(clip.kappa.values()) == 1.0

    def test_reference_needs_per_layer_mode(self, tmpdir):
        with pytest.raises(exceptions.ConfigurationException, match='only applies to per-layer'):
            config.clip_from_dict({'reference': 'x', 'mode': 'global', 'wmax': 0.1})

    def test_reference_is_resolved_against_the_config(self, tmpdir, tiny_mlp):
        storage.save_checkpoint(str(tmpdir / 'reference'), tiny_mlp)
        data = dict(RANDBET, train=dict(RANDBET['train'], clip={'reference': 'reference', 'wmax': 0.2}))
        spec = config.load_config(write_config(tmpdir, data))
        assert spec.train.clip.mode == 'per-layer'


class TestOverrides:
    def test_seed_reaches_every_section(self, tmpdir):
        spec = config.apply_overrides(config.load_config(write_config(tmpdir, RANDBET)), seed=9)
        assert (spec.seed, spec.train.seed, spec.data.seed) == (9, 9, 9)

    def test_nested_fields(self, tmpdir):
        original = config.load_config(write_config(tmpdir, RANDBET))
        spec = config.apply_overrides(original, epochs=5, p=0.05, regime='advbet', epsilon=12, data_path=None)
        assert spec.train.sgd.epochs == 5
        assert spec.train.p == 0.05
        assert spec.train.regime == 'advbet'
        assert spec.train.attack.epsilon == 12
        assert original.train.sgd.epochs == 2

    def test_overrides_are_validated(self, tmpdir):
        spec = config.load_config(write_config(tmpdir, RANDBET))
        with pytest.raises(exceptions.ConfigurationException):
            config.apply_overrides(spec, p=2.0)

    def test_unknown_override(self, tmpdir):
        with pytest.raises(exceptions.ConfigurationException, match='Unknown override: colour'):
            config.apply_overrides(config.ExperimentSpec(), colour='red')
