from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .errors import NonFiniteError


class ParamSet(Mapping[str, np.ndarray]):
    """Named float64 arrays, ordered lexicographically by name.

    Arrays are copied and frozen on construction, so a published ParamSet can
    be shared read-only between workers.
    """

    __slots__ = ("_arrays",)

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        frozen = {}
        for name in sorted(arrays or {}):
            a = np.array(arrays[name], dtype=np.float64, copy=True)
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"parameter {name!r} has non-finite values")
            a.setflags(write=False)
            frozen[name] = a
        self._arrays = frozen

    def __reduce__(self):
        return (ParamSet, (dict(self._arrays),))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._arrays.items())
        return f"ParamSet({inner})"

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self._arrays.items()]

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def flatten(self) -> np.ndarray:
        """Concatenate all arrays (row-major) in name order."""
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    @classmethod
    def unflatten(cls, vector: np.ndarray, shapes) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        shapes = sorted(shapes, key=lambda item: item[0])
        need = sum(int(np.prod(s)) for _, s in shapes)
        if vector.ndim != 1 or vector.size != need:
            raise ValueError(f"flat vector has length {vector.size}, shapes need {need}")
        out, pos = {}, 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            out[name] = vector[pos : pos + n].reshape(shape)
            pos += n
        return cls(out)

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self._arrays.items() if k.startswith(prefix)})

    def merged(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        return ParamSet({**self._arrays, **dict(other)})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._arrays.items()})

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self._arrays.values())))

    def equals(self, other: "ParamSet") -> bool:
        """Exact equality of names, shapes and values."""
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self
        )


def glorot_init(shapes, rng: np.random.Generator) -> ParamSet:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for matrices, zeros for vectors.

    ``shapes`` is a sequence of (name, shape); draws happen in the given order.
    """
    out = {}
    for name, shape in shapes:
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            out[name] = rng.uniform(-limit, limit, size=shape)
        else:
            out[name] = np.zeros(shape)
    return ParamSet(out)
