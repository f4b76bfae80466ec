#!/usr/bin/env python3
"""
Generate synthetic profiled bit error maps

Real measurements of low-voltage memory arrays are not redistributable, so experiments use maps with the same
    structure: a low background rate, a strong asymmetry between 0-to-1 and 1-to-0 flips, and a few columns whose
    cells fail far more often than the rest.

Sample usage:
    ./make_profiled_map.py out_dir --rows 8192 --cols 128
"""
import argparse
import os
import typing as ty

from filefetcher.manager import BuildTask
import numpy as np

from bitfault import biterr, exceptions, storage


def uniform_map(rows: int, cols: int, p: float) -> biterr.ProfiledMap:
    """Every cell flips with probability p in both directions"""
    return biterr.ProfiledMap(np.full((rows, cols), p), np.full((rows, cols), p),
                              voltage_label='uniform p={}'.format(p))


def column_biased_map(rows: int, cols: int, base_p01: float = 0.004, base_p10: float = 0.001,
                      hot_columns: ty.Sequence[int] = None, hot_p01: float = 0.45, hot_p10: float = 0.05,
                      jitter: float = 0.0, seed: int = 0) -> biterr.ProfiledMap:
    """
    Background rates everywhere, plus hot columns. With `jitter` > 0 each background cell's rates are scaled by a
        log-normal factor (sigma = jitter), clipped to [0, 1].

    The default hot column sits at the same relative position as column 37 of a 128-column array.
    """
    if hot_columns is None:
        hot_columns = (cols * 37 // 128,)
    for col in hot_columns:
        if not 0 <= col < cols:
            raise exceptions.RangeException('Hot column {} is outside of a map with {} columns'.format(col, cols))
    p01 = np.full((rows, cols), base_p01)
    p10 = np.full((rows, cols), base_p10)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        p01 = np.clip(p01 * rng.lognormal(0.0, jitter, size=p01.shape), 0, 1)
        p10 = np.clip(p10 * rng.lognormal(0.0, jitter, size=p10.shape), 0, 1)
    for col in hot_columns:
        p01[:, col] = hot_p01
        p10[:, col] = hot_p10
    return biterr.ProfiledMap(p01, p10, voltage_label='chip2-like synthetic')


class MakeColumnBiasedMap(BuildTask):
    """A filefetcher build task that writes a column-biased map directory"""
    def __init__(self, rows: int, cols: int, seed: int = 0, jitter: float = 0.25):
        self.rows = rows
        self.cols = cols
        self.seed = seed
        self.jitter = jitter

    def build(self, manager, item_type: str, build_folder: str, **kwargs):
        dest = os.path.join(build_folder, '{}_{}x{}'.format(item_type, self.rows, self.cols))
        print('Building to: ', dest)
        pmap = column_biased_map(self.rows, self.cols, jitter=self.jitter, seed=self.seed)
        storage.save_profiled_map(dest, pmap)
        return dest, {'mean_rate': pmap.mean_rate(), 'seed': self.seed}


def main(out_dir: str, rows: int, cols: int, seed: int = 0, jitter: float = 0.0):
    """Perform this task in isolation"""
    if os.path.exists(os.path.join(out_dir, 'p01.csv')):
        raise FileExistsError('The requested output directory already holds a map.')
    storage.save_profiled_map(out_dir, column_biased_map(rows, cols, jitter=jitter, seed=seed))


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Write a synthetic column-biased bit error map')
    parser.add_argument('out_dir', help='Directory to write p01.csv, p10.csv and meta.json into')
    parser.add_argument('--rows', type=int, default=8192)
    parser.add_argument('--cols', type=int, default=128)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--jitter', type=float, default=0.0)
    args = parser.parse_args()
    main(args.out_dir, args.rows, args.cols, seed=args.seed, jitter=args.jitter)
