"""Named parameter containers with the bookkeeping training needs."""
from dataclasses import dataclass, fields

import numpy as np


class ParamSet:
    """Mixin for dataclasses whose fields are all float64 arrays."""

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def names(self):
        return [f.name for f in fields(self)]

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.items()})

    def copy(self):
        return self.map(lambda a: np.array(a, dtype=np.float64, copy=True))

    def zeros_like(self):
        return self.map(np.zeros_like)

    def num_params(self):
        return int(sum(np.size(v) for _, v in self.items()))

    def check_finite(self):
        for k, v in self.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k} has non-finite entries")


def gaussian(rng, fan_in, shape):
    """Gaussian init with standard deviation ``1/sqrt(fan_in)``."""
    return rng.standard_normal(shape) / np.sqrt(fan_in)


@dataclass
class ModelParams(ParamSet):
    """Embedding and unembedding around a stack of blocks.

    Block parameters live in a separate list; this holds only the ends.
    """

    embed: np.ndarray
    unembed: np.ndarray
    unembed_bias: np.ndarray
