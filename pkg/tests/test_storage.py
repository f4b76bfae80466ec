"""Test checkpoints, profiled maps, attack results and report files"""

import json
import os

import numpy as np
import pytest

from bitfault import attack, biterr, evaluate, exceptions, network, storage
from bitfault.loaders import make_profiled_map


def read_all(paths):
    out = []
    for path in paths:
        with open(path, 'rb') as f:
            out.append(f.read())
    return out


def edit_manifest(path, **changes):
    with open(path) as f:
        manifest = json.load(f)
    manifest.update(changes)
    with open(path, 'w') as f:
        json.dump(manifest, f)


@pytest.fixture
def checkpoint(tmpdir, quantized_mlp):
    net, q = quantized_mlp
    path = str(tmpdir / 'model')
    storage.save_checkpoint(path, net, q, metadata={'regime': 'randbet', 'seed': 3})
    return path, net, q


class TestCheckpoints:
    def test_paths(self):
        assert storage.checkpoint_paths('a/model.json') == ('a/model.json', 'a/model.bin', 'a/model.codes.bin')
        assert storage.checkpoint_paths('model') == ('model.json', 'model.bin', 'model.codes.bin')

    def test_load_restores_everything(self, checkpoint, synthetic_test):
        path, net, q = checkpoint
        loaded, loaded_q, metadata = storage.load_checkpoint(path)
        assert loaded.param_names == net.param_names
        assert loaded_q == q
        assert metadata == {'regime': 'randbet', 'seed': 3}
        x = synthetic_test.images[:8]
        assert np.array_equal(network.forward(loaded, x).data, network.forward(net, x).data)

    def test_save_load_save_is_byte_identical(self, checkpoint, tmpdir):
        path, _, _ = checkpoint
        net, q, metadata = storage.load_checkpoint(path)
        again = str(tmpdir / 'again')
        storage.save_checkpoint(again, net, q, metadata=metadata)
        assert read_all(storage.checkpoint_paths(path)) == read_all(storage.checkpoint_paths(again))

    def test_float_checkpoint_has_no_codes(self, tmpdir, tiny_mlp):
        path = str(tmpdir / 'float')
        storage.save_checkpoint(path, tiny_mlp)
        assert not os.path.exists(storage.checkpoint_paths(path)[2])
        _, q, metadata = storage.load_checkpoint(path)
        assert q is None and metadata == {}

    def test_missing_entry_is_named(self, checkpoint):
        path, _, _ = checkpoint
        with open(path + '.json') as f:
            entries = json.load(f)['param_index']
        edit_manifest(path + '.json', param_index=[e for e in entries if e['name'] != 'fc1.bias'])
        with pytest.raises(exceptions.CheckpointException, match='missing param_index entry fc1.bias'):
            storage.load_checkpoint(path)

    def test_param_index_entries_carry_their_dtype(self, checkpoint):
        path, net, _ = checkpoint
        with open(path + '.json') as f:
            entries = json.load(f)['param_index']
        assert entries[0] == {'name': 'fc1.weight', 'shape': list(net.param_index[0][1]), 'dtype': '<f4'}
        assert [e['name'] for e in entries] == net.param_names

    def test_malformed_param_index(self, checkpoint):
        path, net, _ = checkpoint
        edit_manifest(path + '.json', param_index=[[name, list(shape)] for name, shape in net.param_index])
        with pytest.raises(exceptions.CheckpointException, match='Malformed manifest'):
            storage.load_checkpoint(path)

    def test_missing_parameter_file(self, checkpoint):
        path, _, _ = checkpoint
        os.remove(storage.checkpoint_paths(path)[1])
        with pytest.raises(exceptions.CheckpointException, match='Parameter file not found'):
            storage.load_checkpoint(path)

    def test_shape_mismatch(self, checkpoint):
        path, _, _ = checkpoint
        other = network.mlp((1, 12, 12), hidden=(8,), seed=0)
        with pytest.raises(exceptions.ShapeException, match='fc1.weight has shape') as e:
            storage.load_checkpoint(path, net=other)
        assert e.value.layer == 'fc1'

    def test_truncated_parameters(self, checkpoint):
        path, _, _ = checkpoint
        params_path = storage.checkpoint_paths(path)[1]
        with open(params_path, 'rb') as f:
            raw = f.read()
        with open(params_path, 'wb') as f:
            f.write(raw[:-4])
        with pytest.raises(exceptions.CheckpointException, match='is truncated at logits.bias'):
            storage.load_checkpoint(path)

    def test_trailing_bytes(self, checkpoint):
        path, _, _ = checkpoint
        with open(storage.checkpoint_paths(path)[1], 'ab') as f:
            f.write(b'\x00' * 3)
        with pytest.raises(exceptions.CheckpointException, match='3 trailing bytes'):
            storage.load_checkpoint(path)

    def test_wrong_code_count(self, checkpoint):
        path, _, _ = checkpoint
        with open(storage.checkpoint_paths(path)[2], 'ab') as f:
            f.write(b'\x00')
        with pytest.raises(exceptions.CheckpointException, match='code words'):
            storage.load_checkpoint(path)

    def test_unsupported_format(self, checkpoint):
        path, _, _ = checkpoint
        edit_manifest(path + '.json', format='something-else')
        with pytest.raises(exceptions.CheckpointException, match='Unsupported checkpoint format'):
            storage.load_checkpoint(path)

    def test_missing_manifest(self, tmpdir):
        with pytest.raises(exceptions.ConfigurationException, match='File not found'):
            storage.load_checkpoint(str(tmpdir / 'nothing'))

    def test_unparseable_manifest(self, tmpdir):
        path = str(tmpdir / 'bad.json')
        with open(path, 'w') as f:
            f.write('{"format": ')
        with pytest.raises(exceptions.ParseException, match='Could not parse'):
            storage.load_checkpoint(path)


class TestProfiledMaps:
    def test_round_trip(self, tmpdir):
        pmap = make_profiled_map.column_biased_map(4, 16, jitter=0.3, seed=2)
        directory = str(tmpdir / 'map')
        storage.save_profiled_map(directory, pmap)
        loaded = storage.load_profiled_map(directory)
        assert np.array_equal(loaded.p01, pmap.p01)
        assert np.array_equal(loaded.p10, pmap.p10)
        assert loaded.voltage_label == 'chip2-like synthetic'

    def test_rejects_values_outside_the_unit_interval(self, tmpdir):
        directory = str(tmpdir)
        storage.save_profiled_map(directory, make_profiled_map.uniform_map(2, 3, 0.1))
        with open(os.path.join(directory, 'p01.csv'), 'w') as f:
            f.write('0.1,0.1,0.1\n0.1,1.3,0.1\n')
        with pytest.raises(exceptions.RangeException, match='p01 value 1.3 at row 1, column 1'):
            storage.load_profiled_map(directory)

    def test_empty_map(self, tmpdir):
        directory = str(tmpdir)
        storage.save_profiled_map(directory, make_profiled_map.uniform_map(2, 3, 0.1))
        open(os.path.join(directory, 'p10.csv'), 'w').close()
        with pytest.raises(exceptions.ParseException, match='Matrix is empty'):
            storage.load_profiled_map(directory)

    def test_meta_shape_mismatch(self, tmpdir):
        directory = str(tmpdir)
        storage.save_profiled_map(directory, make_profiled_map.uniform_map(2, 3, 0.1))
        edit_manifest(os.path.join(directory, 'meta.json'), rows=4)
        with pytest.raises(exceptions.ParseException, match='meta.json declares'):
            storage.load_profiled_map(directory)

    def test_meta_is_optional(self, tmpdir):
        directory = str(tmpdir)
        storage.save_profiled_map(directory, make_profiled_map.uniform_map(2, 3, 0.1))
        os.remove(os.path.join(directory, 'meta.json'))
        assert storage.load_profiled_map(directory).mean_rate() == pytest.approx(0.1)

    def test_build_task_writes_a_loadable_map(self, tmpdir):
        task = make_profiled_map.MakeColumnBiasedMap(rows=8, cols=128, seed=1)
        dest, meta = task.build(None, 'profiled_map', str(tmpdir))
        pmap = storage.load_profiled_map(dest)
        assert (pmap.rows, pmap.cols) == (8, 128)
        assert meta['mean_rate'] == pytest.approx(pmap.mean_rate())
        assert pmap.p01[:, 37].min() > pmap.p01[:, 0].max()


class TestAttackResults:
    def test_round_trip(self, tmpdir, quantized_mlp):
        _, q = quantized_mlp
        flips = [('fc1.weight', 3, 7), ('logits.bias', 2, 0)]
        result = attack.AttackResult(attack.replay(q, flips), flips, [1.0, 2.5], 1, attack.AttackConfig(epsilon=2))
        path = str(tmpdir / 'attack.json')
        storage.save_attack_result(path, result, extra={'error': 0.25})

        loaded, data = storage.load_attack_result(path, q)
        assert loaded.flips == flips
        assert loaded.perturbed == result.perturbed
        assert loaded.config == result.config
        assert data['error'] == 0.25

    def test_malformed(self, tmpdir, quantized_mlp):
        _, q = quantized_mlp
        path = str(tmpdir / 'attack.json')
        with open(path, 'w') as f:
            json.dump({'loss_trace': []}, f)
        with pytest.raises(exceptions.ParseException, match='Malformed attack result'):
            storage.load_attack_result(path, q)


class TestReports:
    def test_row_formatting(self, tmpdir):
        path = str(tmpdir / 'rows.csv')
        storage.write_rows(path, ('a', 'b', 'c', 'd'), [(0.1, None, True, 'x'), (1, 2.5, False, '')])
        with open(path) as f:
            assert f.read() == 'a,b,c,d\n0.1,,1,x\n1,2.5,0,\n'

    def test_save_report(self, tmpdir):
        report = evaluate.EvalReport('m', 0.125, n=100, l=4)
        report.rte = {0.01: evaluate.RteStats(0.01, [0.25, 0.5])}
        prefix = str(tmpdir / 'report')
        storage.save_report(prefix, [report], evaluate.REPORT_FIELDS)

        with open(prefix + '.json') as f:
            assert json.load(f)[0]['te'] == 0.125
        with open(prefix + '.csv') as f:
            lines = f.read().splitlines()
        assert lines[0] == ','.join(evaluate.REPORT_FIELDS)
        assert lines[1] == 'm,te,,0.125,0.0,0.125,0.125'
        assert lines[2] == 'm,rte,0.01,0.375,0.125,0.25,0.5'


class TestMapHelpers:
    def test_uniform_map(self):
        pmap = make_profiled_map.uniform_map(3, 4, 0.02)
        assert pmap.mean_rate() == pytest.approx(0.02)
        assert isinstance(pmap, biterr.ProfiledMap)

    def test_hot_columns(self):
        pmap = make_profiled_map.column_biased_map(2, 8, hot_columns=(1, 5))
        assert pmap.p01[:, 1].tolist() == [0.45, 0.45]
        assert pmap.p10[:, 5].tolist() == [0.05, 0.05]
        assert pmap.p01[0, 0] == 0.004

    def test_refuses_to_overwrite(self, tmpdir):
        make_profiled_map.main(str(tmpdir), 2, 4)
        with pytest.raises(FileExistsError):
            make_profiled_map.main(str(tmpdir), 2, 4)

    def test_default_hot_column_scales_with_the_width(self):
        assert make_profiled_map.column_biased_map(2, 128).p01[:, 37].tolist() == [0.45, 0.45]
        narrow = make_profiled_map.column_biased_map(2, 16)
        assert narrow.p01[:, 4].tolist() == [0.45, 0.45]
        assert (narrow.p01 == 0.45).sum() == 2

    def test_hot_columns_must_fit(self):
        with pytest.raises(exceptions.RangeException, match='Hot column 37 is outside of a map with 16 columns'):
            make_profiled_map.column_biased_map(2, 16, hot_columns=(37,))
