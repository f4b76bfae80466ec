"""
Files on disk: checkpoints, profiled bit error maps, attack results and evaluation reports

All writers are deterministic: JSON is written with sorted keys, floats with their shortest round-trip repr, and
    binary arrays little-endian in param_index order.
"""
import collections
import csv
import json
import logging
import os
import typing as ty

import numpy as np

from . import attack as adv, biterr, exceptions, network, quant, readers
from .const import CHECKPOINT_FORMAT


logger = logging.getLogger(__name__)


def _dump_json(data, path: str):
    with open(path, 'w') as f:
        f.write(json.dumps(data, sort_keys=True, indent=2))
        f.write('\n')


def _load_json(path: str) -> dict:
    if not os.path.isfile(path):
        raise exceptions.ConfigurationException('File not found: {}'.format(path))
    with open(path, 'r') as f:
        try:
            return json.load(f)
        except ValueError as e:
            raise exceptions.ParseException('Could not parse {}: {}'.format(path, e), offset=getattr(e, 'pos', None))


def checkpoint_paths(path: str) -> ty.Tuple[str, str, str]:
    """(manifest, parameters, codes) for a checkpoint named `path` or `path.json`"""
    base = path[:-len('.json')] if path.endswith('.json') else path
    return base + '.json', base + '.bin', base + '.codes.bin'


######
# Checkpoints
def save_checkpoint(path: str, net: network.Network, q: quant.QuantizedParams = None, metadata: dict = None) -> str:
    manifest_path, params_path, codes_path = checkpoint_paths(path)
    dtype = np.dtype(net.dtype).newbyteorder('<')
    manifest = {
        'format': CHECKPOINT_FORMAT,
        'architecture': net.describe(),
        'param_index': [{'name': name, 'shape': list(shape), 'dtype': dtype.str} for name, shape in net.param_index],
        'metadata': metadata or {},
    }
    if q is not None:
        if q.names != net.param_names:
            raise exceptions.CheckpointException('Quantized parameters do not match the network')
        manifest['quantization'] = q.to_dict()

    with open(params_path, 'wb') as f:
        for w in net.parameters().values():
            f.write(np.ascontiguousarray(w, dtype=dtype).tobytes())
    if q is not None:
        with open(codes_path, 'wb') as f:
            f.write(q.flat_codes().tobytes())
    elif os.path.exists(codes_path):
        os.remove(codes_path)
    _dump_json(manifest, manifest_path)
    logger.debug('Wrote checkpoint {} ({} parameters)'.format(manifest_path, net.n_weights))
    return manifest_path


def _read_param_index(manifest: dict, manifest_path: str) -> ty.Mapping[str, ty.Tuple[tuple, np.dtype]]:
    """name -> (shape, dtype) for every `{name, shape, dtype}` entry"""
    try:
        recorded = collections.OrderedDict(
            (entry['name'], (tuple(entry['shape']), np.dtype(entry['dtype']))) for entry in manifest['param_index'])
    except (KeyError, TypeError, ValueError) as e:
        raise exceptions.CheckpointException('Malformed manifest {}: {}'.format(manifest_path, e))
    if not recorded:
        raise exceptions.CheckpointException('Manifest {} has an empty param_index'.format(manifest_path))
    return recorded


def load_checkpoint(path: str, net: network.Network = None) \
        -> ty.Tuple[network.Network, ty.Optional[quant.QuantizedParams], dict]:
    """
    Read a checkpoint into `net` (or into a network rebuilt from the recorded architecture)

    :return: (net, quantized parameters if recorded, metadata)
    """
    manifest_path, params_path, codes_path = checkpoint_paths(path)
    manifest = _load_json(manifest_path)
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise exceptions.CheckpointException('Unsupported checkpoint format: {}'.format(manifest.get('format')))
    recorded = _read_param_index(manifest, manifest_path)

    if net is None:
        first_dtype = next(iter(recorded.values()))[1]
        net = network.Network.from_description(manifest.get('architecture', {}),
                                               dtype=first_dtype.newbyteorder('='))
    for name, shape in net.param_index:
        if name not in recorded:
            raise exceptions.CheckpointException('Checkpoint is missing param_index entry {}'.format(name))
        if recorded[name][0] != tuple(shape):
            raise exceptions.ShapeException('{} has shape {} in the checkpoint, expected {}'.format(
                name, recorded[name][0], shape), layer=name.split('.')[0])

    if not os.path.isfile(params_path):
        raise exceptions.CheckpointException('Parameter file not found: {}'.format(params_path))
    with open(params_path, 'rb') as f:
        raw = f.read()
    values = collections.OrderedDict()
    offset = 0
    for name, (shape, dtype) in recorded.items():
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise exceptions.CheckpointException('{} is truncated at {}'.format(params_path, name), offset=len(raw))
        values[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise exceptions.CheckpointException('{} has {} trailing bytes'.format(params_path, len(raw) - offset),
                                             offset=offset)
    net.load_parameters(values)

    q = None
    if manifest.get('quantization'):
        shapes = collections.OrderedDict((name, shape) for name, (shape, _) in recorded.items())
        q = _load_codes(manifest['quantization'], shapes, codes_path, np.dtype(net.dtype))
        if q.names != net.param_names:
            q = quant.QuantizedParams(
                collections.OrderedDict((k, q.codes[k]) for k in net.param_names),
                collections.OrderedDict((k, q.ranges[k]) for k in net.param_names), q.scheme, q.dtype)
    return net, q, manifest.get('metadata', {})


def _load_codes(section: dict, recorded: ty.Mapping[str, tuple], codes_path: str, dtype) -> quant.QuantizedParams:
    try:
        scheme = quant.QuantScheme(**section['scheme'])
        ranges = collections.OrderedDict((name, tuple(section['ranges'][name])) for name in recorded)
    except KeyError as e:
        raise exceptions.CheckpointException('Quantization section is missing {}'.format(e))
    if not os.path.isfile(codes_path):
        raise exceptions.CheckpointException('Code words file not found: {}'.format(codes_path))
    with open(codes_path, 'rb') as f:
        flat = np.frombuffer(f.read(), dtype=np.uint8)
    total = sum(int(np.prod(shape)) for shape in recorded.values())
    if flat.size != total:
        raise exceptions.CheckpointException('{} holds {} code words, expected {}'.format(
            codes_path, flat.size, total), offset=flat.size)
    codes = collections.OrderedDict()
    start = 0
    for name, shape in recorded.items():
        size = int(np.prod(shape))
        codes[name] = flat[start:start + size].reshape(shape).copy()
        start += size
    return quant.QuantizedParams(codes, ranges, scheme, dtype)


######
# Profiled bit error maps
def _write_matrix(path: str, values: np.ndarray):
    with open(path, 'w') as f:
        for row in values:
            f.write(','.join(repr(float(v)) for v in row))
            f.write('\n')


def save_profiled_map(directory: str, pmap: biterr.ProfiledMap):
    os.makedirs(directory, exist_ok=True)
    _write_matrix(os.path.join(directory, 'p01.csv'), pmap.p01)
    _write_matrix(os.path.join(directory, 'p10.csv'), pmap.p10)
    _dump_json(pmap.to_meta(), os.path.join(directory, 'meta.json'))


def load_profiled_map(directory: str) -> biterr.ProfiledMap:
    """A directory with p01.csv and p10.csv (one memory row per line) and an optional meta.json"""
    p01 = readers.read_matrix(os.path.join(directory, 'p01.csv'))
    p10 = readers.read_matrix(os.path.join(directory, 'p10.csv'))
    meta_path = os.path.join(directory, 'meta.json')
    meta = _load_json(meta_path) if os.path.isfile(meta_path) else {}
    expected = (meta.get('rows', p01.shape[0]), meta.get('cols', p01.shape[1]))
    if p01.shape != tuple(expected):
        raise exceptions.ParseException('Map in {} has shape {} but meta.json declares {}'.format(
            directory, p01.shape, expected))
    pmap = biterr.ProfiledMap(p01, p10, p_sa=meta.get('p_sa', 0.0), voltage_label=meta.get('voltage_label', ''))
    logger.debug('Loaded a {} x {} profiled map with mean rate {:.4%}'.format(pmap.rows, pmap.cols, pmap.mean_rate()))
    return pmap


######
# Attack results
def save_attack_result(path: str, result: adv.AttackResult, extra: dict = None):
    data = result.to_dict()
    data.update(extra or {})
    _dump_json(data, path)


def load_attack_result(path: str, clean: quant.QuantizedParams) -> ty.Tuple[adv.AttackResult, dict]:
    """The result with its perturbed codes rebuilt by replaying the flips on `clean`, plus the raw JSON"""
    data = _load_json(path)
    try:
        return adv.AttackResult.from_dict(data, clean), data
    except (KeyError, TypeError, ValueError) as e:
        raise exceptions.ParseException('Malformed attack result {}: {}'.format(path, e))


######
# Reports
def write_rows(path: str, fields: ty.Sequence[str], rows: ty.Iterable[ty.Sequence]):
    def fmt(value):
        if value is None:
            return ''
        if isinstance(value, bool):
            return int(value)
        return repr(float(value)) if isinstance(value, float) else value

    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(fields)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def save_report(prefix: str, reports: ty.Sequence, fields: ty.Sequence[str]):
    """`prefix.json` with every report's dict and `prefix.csv` with their flat rows"""
    _dump_json([report.to_dict() for report in reports], prefix + '.json')
    write_rows(prefix + '.csv', fields, [row for report in reports for row in report.rows()])
