"""
Parsers: handle the act of reading one entity (a line of a probability map, or a whole IDX buffer)
"""
import typing as ty

try:
    from fastnumbers import float
except ImportError:  # pragma: no cover
    pass

import numpy as np

from . import exceptions


# IDX type codes and the (big-endian) numpy dtype for each
IDX_DTYPES = {
    0x08: np.dtype('u1'),
    0x09: np.dtype('i1'),
    0x0B: np.dtype('>i2'),
    0x0C: np.dtype('>i4'),
    0x0D: np.dtype('>f4'),
    0x0E: np.dtype('>f8'),
}


def MatrixRowParser(delimiter: str = ','):
    """
    Build a parser for one row of a numeric matrix (eg. one memory row of a profiled map). The returned closure
        splits the row on `delimiter` and yields a tuple of floats.
    """
    def inner(line: str) -> ty.Tuple[float, ...]:
        try:
            return tuple(float(value) for value in line.strip().split(delimiter))
        except Exception as e:
            raise exceptions.LineParseException(str(e), line=line)

    inner.delimiter = delimiter  # type: ignore
    return inner


def parse_idx_header(data: bytes) -> ty.Tuple[int, ty.Tuple[int, ...], int]:
    """
    Read the header of an IDX buffer: two zero bytes, a type code, the number of dimensions, then one big-endian
        uint32 per dimension.

    :return: (magic, dims, header length in bytes), where `magic` is the first four bytes as a big-endian integer
    """
    if len(data) < 4:
        raise exceptions.ParseException('IDX header is truncated', offset=len(data))
    if data[0] != 0 or data[1] != 0:
        raise exceptions.ParseException('Bad IDX magic number: {}'.format(data[:4].hex()), offset=0)
    type_code = data[2]
    if type_code not in IDX_DTYPES:
        raise exceptions.ParseException('Unknown IDX type code 0x{:02x}'.format(type_code), offset=2)
    ndims = data[3]
    end = 4 + 4 * ndims
    if len(data) < end:
        raise exceptions.ParseException('IDX dimensions are truncated', offset=len(data))
    dims = tuple(int(d) for d in np.frombuffer(data, dtype='>u4', count=ndims, offset=4))
    return int.from_bytes(data[:4], 'big'), dims, end


def parse_idx(data: bytes, expected_magic: int = None) -> np.ndarray:
    """Decode an IDX buffer into an array with the recorded shape (native byte order)"""
    magic, dims, start = parse_idx_header(data)
    if expected_magic is not None and magic != expected_magic:
        raise exceptions.ParseException(
            'Expected IDX magic 0x{:08x}, found 0x{:08x}'.format(expected_magic, magic), offset=0)
    dtype = IDX_DTYPES[data[2]]
    count = int(np.prod(dims)) if dims else 1
    needed = start + count * dtype.itemsize
    if len(data) < needed:
        raise exceptions.ParseException(
            'IDX body is truncated: expected {} bytes, found {}'.format(needed, len(data)), offset=len(data))
    values = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    return values.astype(dtype.newbyteorder('=')).reshape(dims)
