"""Functions on finite configurations: storage, K-transform, quadrature and norms."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .grid import ConfigSpace, GridGeometry


def _key(cells) -> tuple:
    key = tuple(int(c) for c in cells)
    if any(a >= b for a, b in zip(key, key[1:])):
        raise ValueError(f"configuration must be strictly increasing: {key}")
    return key


class TruncatedGammaFunction:
    """A function on configurations with at most ``n_max`` cells.

    ``levels[n]`` maps strictly increasing n-tuples to floats; missing keys
    read as zero.  Level 0 always holds the key ``()``.
    """

    def __init__(self, n_max: int, levels: list[dict] | None = None):
        self.n_max = int(n_max)
        if levels is None:
            levels = [dict() for _ in range(self.n_max + 1)]
        if len(levels) != self.n_max + 1:
            raise ValueError("need one table per level 0..n_max")
        self.levels = []
        for n, tab in enumerate(levels):
            clean = {}
            for k, v in tab.items():
                k = _key(k)
                if len(k) != n:
                    raise ValueError(f"key {k} stored at level {n}")
                clean[k] = float(v)
            self.levels.append(clean)
        self.levels[0].setdefault((), 0.0)

    # -- access ---------------------------------------------------------
    def __call__(self, cells) -> float:
        cells = tuple(cells)
        n = len(cells)
        if n > self.n_max:
            return 0.0
        return self.levels[n].get(cells, 0.0)

    def __getitem__(self, cells) -> float:
        return self(cells)

    def items(self):
        """(key, value) pairs, level by level, lexicographic inside a level."""
        for tab in self.levels:
            for k in sorted(tab):
                yield k, tab[k]

    def level_items(self, n: int):
        tab = self.levels[n]
        return [(k, tab[k]) for k in sorted(tab)]

    def copy(self) -> "TruncatedGammaFunction":
        return TruncatedGammaFunction(self.n_max, [dict(t) for t in self.levels])

    def map_values(self, fn) -> "TruncatedGammaFunction":
        return TruncatedGammaFunction(self.n_max, [{k: fn(k, v) for k, v in t.items()} for t in self.levels])

    def truncated(self, n_max: int) -> "TruncatedGammaFunction":
        levels = [dict(self.levels[n]) if n <= self.n_max else {} for n in range(n_max + 1)]
        return TruncatedGammaFunction(n_max, levels)

    # -- constructors ---------------------------------------------------
    @classmethod
    def indicator_empty(cls, n_max: int, value: float = 1.0):
        f = cls(n_max)
        f.levels[0][()] = float(value)
        return f

    @classmethod
    def from_function(cls, space: ConfigSpace, fn: Callable[[tuple], float], drop_zeros=False):
        levels = []
        for arr in space.levels:
            tab = {}
            for row in arr:
                k = tuple(int(c) for c in row)
                v = float(fn(k))
                if v != 0.0 or not drop_zeros:
                    tab[k] = v
            levels.append(tab)
        return cls(space.n_max, levels)

    @classmethod
    def from_vector(cls, space: ConfigSpace, vec: np.ndarray, drop_zeros: bool = True):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (space.size,):
            raise ValueError("vector length does not match the configuration space")
        levels = []
        for n, arr in enumerate(space.levels):
            vals = vec[space.level_slice(n)]
            nz = np.nonzero(vals)[0] if drop_zeros and n > 0 else np.arange(len(vals))
            levels.append({tuple(int(c) for c in arr[i]): float(vals[i]) for i in nz})
        return cls(space.n_max, levels)

    def to_vector(self, space: ConfigSpace) -> np.ndarray:
        if space.n_max < self.n_max:
            bad = [k for n in range(space.n_max + 1, self.n_max + 1) for k, v in self.levels[n].items() if v]
            if bad:
                raise ValueError("function has entries above the space's n_max")
        vec = np.zeros(space.size)
        for n in range(min(self.n_max, space.n_max) + 1):
            tab = self.levels[n]
            if not tab:
                continue
            if n == 0:
                vec[0] = tab.get((), 0.0)
                continue
            keys = np.array(list(tab.keys()), dtype=np.int64)
            vec[space.index_rows(keys)] = np.fromiter(tab.values(), dtype=float, count=len(tab))
        return vec

    # -- serialization --------------------------------------------------
    def to_json_obj(self) -> dict:
        return {
            "n_max": self.n_max,
            "levels": [
                {"n": n, "entries": [{"cells": list(k), "value": v} for k, v in self.level_items(n)]}
                for n in range(self.n_max + 1)
            ],
        }

    def to_json(self) -> str:
        # 17 significant digits round-trip IEEE doubles exactly
        return _reformat_floats(self.to_json_obj())

    @classmethod
    def from_json_obj(cls, obj: dict):
        n_max = int(obj["n_max"])
        levels = [dict() for _ in range(n_max + 1)]
        for lev in obj["levels"]:
            n = int(lev["n"])
            for e in lev["entries"]:
                levels[n][tuple(e["cells"])] = float(e["value"])
        return cls(n_max, levels)

    @classmethod
    def from_json(cls, text: str):
        return cls.from_json_obj(json.loads(text))

    def __repr__(self):
        counts = [len(t) for t in self.levels]
        return f"TruncatedGammaFunction(n_max={self.n_max}, entries={counts})"


def _fmt(v: float) -> str:
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError("non-finite value cannot be serialized")
    return format(v, ".17g")


def _reformat_floats(obj: dict) -> str:
    parts = []
    for lev in obj["levels"]:
        ents = ",".join(
            '{"cells":[%s],"value":%s}' % (",".join(str(c) for c in e["cells"]), _fmt(e["value"]))
            for e in lev["entries"]
        )
        parts.append('{"n":%d,"entries":[%s]}' % (lev["n"], ents))
    return '{"n_max":%d,"levels":[%s]}' % (obj["n_max"], ",".join(parts))


@dataclass(frozen=True)
class NormContext:
    C: float
    grid: GridGeometry

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")


def lp_integral(F: TruncatedGammaFunction, grid: GridGeometry) -> float:
    """Unordered-subset quadrature of the Lebesgue-Poisson integral."""
    h = grid.cell_volume
    total = 0.0
    for n in range(F.n_max + 1):
        s = 0.0
        for _, v in F.level_items(n):
            s += v
        total += s * h ** n
    return total


def e_lambda(f, eta) -> float:
    """Coherent state: product of f over the cells of eta (1 on the empty set)."""
    out = 1.0
    for x in eta:
        out *= f[x]
    return float(out)


def _subsets(gamma: tuple) -> Iterable[tuple]:
    for n in range(len(gamma) + 1):
        yield from itertools.combinations(gamma, n)


def k_transform(G: TruncatedGammaFunction, gamma) -> float:
    gamma = _key(gamma)
    if len(gamma) > G.n_max:
        raise ValueError(f"|gamma|={len(gamma)} exceeds n_max={G.n_max}: K-transform incomplete")
    return float(sum(G(xi) for xi in _subsets(gamma)))


def k_inverse(F: Callable[[tuple], float], eta) -> float:
    eta = _key(eta)
    n = len(eta)
    total = 0.0
    for xi in _subsets(eta):
        total += (-1) ** (n - len(xi)) * F(xi)
    return float(total)


def duality_pairing(G: TruncatedGammaFunction, k: TruncatedGammaFunction, grid: GridGeometry) -> float:
    if G.n_max != k.n_max:
        raise ValueError("duality pairing needs equal n_max")
    prod = TruncatedGammaFunction(
        G.n_max, [{key: v * k(key) for key, v in tab.items()} for tab in G.levels]
    )
    return lp_integral(prod, grid)


def norm_LC(G: TruncatedGammaFunction, ctx: NormContext) -> float:
    h = ctx.grid.cell_volume
    total = 0.0
    for n in range(G.n_max + 1):
        s = sum(abs(v) for _, v in G.level_items(n))
        total += (ctx.C * h) ** n * s
    return total


def norm_KC(k: TruncatedGammaFunction, ctx: NormContext) -> float:
    best = 0.0
    for n in range(k.n_max + 1):
        for v in k.levels[n].values():
            best = max(best, abs(v) * ctx.C ** (-n))
    return best


def minlos_check(H: Callable[[tuple, tuple, tuple], float], n_max: int, grid: GridGeometry):
    """Both sides of the Minlos identity by direct enumeration on the grid."""
    space = ConfigSpace(grid.n_cells, n_max)
    h = grid.cell_volume
    lhs = 0.0
    for n, arr in enumerate(space.levels):
        s = 0.0
        for row in arr:
            eta = tuple(int(c) for c in row)
            for xi in _subsets(eta):
                rest = tuple(c for c in eta if c not in xi)
                s += H(xi, rest, eta)
        lhs += s * h ** n
    rhs = 0.0
    for n1 in range(n_max + 1):
        for row in space.levels[n1]:
            xi = tuple(int(c) for c in row)
            for n2 in range(n_max - n1 + 1):
                rows, _ = space.disjoint_rows(n2, xi)
                s = 0.0
                for r2 in rows:
                    eta = tuple(int(c) for c in r2)
                    s += H(xi, eta, tuple(sorted(xi + eta)))
                rhs += s * h ** (n1 + n2)
    return lhs, rhs


# -- vector helpers used by the operator modules --------------------------

def vec_norm_LC(space: ConfigSpace, vec: np.ndarray, C: float, h_d: float) -> float:
    return float(np.abs(vec) @ space.weights(C * h_d))


def vec_norm_KC(space: ConfigSpace, vec: np.ndarray, C: float) -> float:
    if vec.size == 0:
        return 0.0
    return float(np.max(np.abs(vec) * C ** (-space.level_of.astype(float))))


def vec_pairing(space: ConfigSpace, G: np.ndarray, k: np.ndarray, h_d: float) -> float:
    return float((G * k) @ space.weights(h_d))
