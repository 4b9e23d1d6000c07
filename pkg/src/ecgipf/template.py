"""Front template V and the particle-to-voltage reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# rows of (particles x centers x vertices) evaluated per block; bounds peak memory
_CHUNK_ELEMENTS = 4_000_000


def v_template(xi, width: float = 5.0):
    """Smoothed Heaviside: 0 below ``-width``, 1 above ``+width``, cubic in between."""
    if width <= 0:
        raise ValueError(f"width must be > 0, got {width}")
    x = np.clip(np.asarray(xi, dtype=float) / width, -1.0, 1.0)
    out = 0.5 + 0.25 * x * (3.0 - x * x)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class FrontTemplate:
    width: float = 5.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"width must be > 0, got {self.width}")

    def __call__(self, xi):
        return v_template(xi, self.width)


@dataclass
class VoltageField:
    values: np.ndarray
    time_index: int = 0


def reconstruct_batch(centers: np.ndarray, radii: np.ndarray, table, width: float) -> np.ndarray:
    """Voltage fields for many particles at once.

    ``centers`` and ``radii`` have shape (N, l); the result is (N, m) with
    ``out[i, x] = max_j V(radii[i, j] - d(x, centers[i, j]))``.
    """
    centers = np.asarray(centers)
    radii = np.asarray(radii, dtype=float)
    n, l = centers.shape
    m = table.n_vertices
    if centers.size and (centers.min() < 0 or centers.max() >= m):
        raise IndexError("center index out of range")
    out = np.empty((n, m))
    step = max(1, _CHUNK_ELEMENTS // max(1, l * m))
    for s in range(0, n, step):
        d = table.rows(centers[s:s + step])  # (b, l, m)
        xi = radii[s:s + step, :, None] - d
        # V is nondecreasing, so max_j V(xi_j) = V(max_j xi_j)
        out[s:s + step] = v_template(xi.max(axis=1), width)
    return out


def reconstruct_tmv(particle, table, template: FrontTemplate, time_index: int = 0) -> VoltageField:
    """Reconstructed transmembrane voltage of one particle at every vertex."""
    c = np.atleast_1d(np.asarray(particle.centers))
    r = np.atleast_1d(np.asarray(particle.radii, dtype=float))
    if np.any(r < 0):
        raise ValueError("radii must be >= 0")
    v = reconstruct_batch(c[None], r[None], table, template.width)[0]
    return VoltageField(v, time_index)
