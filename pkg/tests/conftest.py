"""Shared analytic-field stand-ins used as oracles across the test suite."""

import numpy as np
import torch

from planesdf.field import DTYPE


class FunctionField:
    """Quacks like FieldNetwork but evaluates closed-form functions.

    sdf_fn must be a torch-differentiable function of (n, 3) points.  Colors
    and segment probabilities default to constants.
    """

    def __init__(self, sdf_fn, color=(0.5, 0.5, 0.5), h_const=0.5, n_slots=4, beta=0.01):
        self.sdf_fn = sdf_fn
        self._color = torch.tensor(color, dtype=DTYPE)
        self._h = h_const
        self.n_slots = n_slots
        self.beta = torch.tensor(float(beta), dtype=DTYPE)

    def sdf(self, x):
        return self.sdf_fn(x)

    def sdf_and_feature(self, x):
        s = self.sdf_fn(x)
        return s, torch.zeros(x.shape[0], 1, dtype=DTYPE)

    def query(self, x, v):
        s, f = self.sdf_and_feature(x)
        c = self._color.expand(x.shape[0], 3)
        h = torch.full((x.shape[0], self.n_slots), self._h, dtype=DTYPE)
        return c, s, h, f


def plane_field(normal, offset, beta=0.01, **kw):
    """Exact SDF of a half-space: matter (positive side) where n.x >= offset."""
    n = torch.tensor(np.asarray(normal, dtype=np.float64) /
                     np.linalg.norm(normal), dtype=DTYPE)

    def sdf_fn(x):
        return x @ n - offset

    return FunctionField(sdf_fn, beta=beta, **kw)


def sphere_field(radius, beta=0.01, **kw):
    """Exact SDF of a solid ball: positive inside."""

    def sdf_fn(x):
        return radius - x.norm(dim=-1)

    return FunctionField(sdf_fn, beta=beta, **kw)
