"""
Row sources for numeric text files (profiled bit error maps) and raw byte access for binary files (IDX, checkpoints)

A reader yields one parsed row per non-blank line, from a list of strings, a text file or a gzipped text file.
"""
import abc
import gzip
import itertools
import logging
import os
import typing as ty

import numpy as np

from . import (
    exceptions,
    parsers,
)


logger = logging.getLogger(__name__)

GZIP_MAGIC = b'\x1f\x8b'

RowParser = ty.Callable[[str], ty.Tuple[float, ...]]


class BaseReader(abc.ABC):
    """Parse rows from some source of text lines, optionally tolerating a limited number of bad rows"""
    def __init__(self,
                 source: ty.Any,
                 parser: ty.Optional[RowParser] = None,
                 skip_rows: int = 0,
                 skip_errors: bool = False,
                 max_errors: int = 100):
        """
        :param source: Where the lines come from; each subclass decides what this means
        :param parser: Turns one line into a row. Defaults to comma-separated floats.
        :param skip_rows: Header lines to drop before parsing
        :param skip_errors: Record unparseable lines and keep going, instead of raising on the first one
        :param max_errors: In skip_errors mode, give up once this many lines have failed
        """
        self._source = source
        self._parser = parser or parsers.MatrixRowParser()
        self._skip_rows = skip_rows
        self._skip_errors = skip_errors
        self._max_errors = max_errors
        # (line number, message, raw text) for every line skipped during the last pass
        self.errors = []  # type: ty.List[ty.Tuple[int, str, str]]

    @abc.abstractmethod
    def _create_iterator(self) -> ty.Iterator[str]:
        """Lines of the source, in order"""

    def _record_error(self, line_no: int, error: exceptions.LineParseException, text: str):
        if not self._skip_errors:
            raise error
        self.errors.append((line_no, str(error), text))
        if len(self.errors) >= self._max_errors:
            raise exceptions.TooManyBadLinesException(error_list=self.errors)

    def __iter__(self) -> ty.Iterator[ty.Tuple[float, ...]]:
        self.errors = []
        lines = itertools.islice(self._create_iterator(), self._skip_rows, None)
        for line_no, text in enumerate(lines, start=self._skip_rows + 1):
            if not text.strip():
                continue
            try:
                yield self._parser(text)
            except exceptions.LineParseException as e:
                self._record_error(line_no, e, text)


class IterableReader(BaseReader):
    """Rows from an in-memory sequence of lines; handy in tests"""
    def _create_iterator(self):
        return iter(self._source)


class TextFileReader(BaseReader):
    def _create_iterator(self):
        with open(self._source, 'r') as f:
            yield from f


class GzipTextReader(BaseReader):
    def _create_iterator(self):
        with gzip.open(self._source, 'rt') as f:
            yield from f


def is_gzip(path: str) -> bool:
    with open(path, 'rb') as f:
        return f.read(2) == GZIP_MAGIC


def get_reader(source: ty.Union[ty.Iterable, str]) -> ty.Type[BaseReader]:
    """Reader class for a source: a list of lines, a gzipped file or a plain text file"""
    if not isinstance(source, str):
        return IterableReader
    return GzipTextReader if is_gzip(source) else TextFileReader


def read_bytes(path: str) -> bytes:
    """The content of a file, decompressed if it is gzipped (eg. `train-images-idx3-ubyte.gz`)"""
    opener = gzip.open if is_gzip(path) else open
    with opener(path, 'rb') as f:  # type: ignore
        return f.read()


def read_matrix(source: ty.Union[ty.Iterable, str], delimiter: str = ',', skip_errors: bool = False,
                max_errors: int = 100) -> np.ndarray:
    """Read a numeric matrix with one row per line into a float64 array"""
    if isinstance(source, str) and not os.path.isfile(source):
        raise exceptions.ConfigurationException('File not found: {}'.format(source))
    reader = get_reader(source)(source, parser=parsers.MatrixRowParser(delimiter=delimiter),
                                skip_errors=skip_errors, max_errors=max_errors)
    rows = list(reader)
    if reader.errors:
        logger.warning('Skipped {} unparseable lines in {}'.format(len(reader.errors), source))
    if not rows:
        raise exceptions.ParseException('Matrix is empty: {}'.format(source))
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise exceptions.ParseException(
                'Row {} has {} columns; expected {}'.format(i + 1, len(row), width), line=i + 1)
    return np.array(rows, dtype=np.float64)
