"""Periodic 1D grid with spacing-weighted inner products and Fourier multipliers.

The box is [-L, L) with n equispaced nodes, so every function of the momentum
operator acts as an exact multiplier in the discrete Fourier basis.  All
downstream operator constructions live on top of the four primitives here:
``inner``, ``transform``, ``apply_multiplier`` and ``multiplier_matrix``.

States and fields are plain numpy arrays of length ``grid.n``; operations
that need the measure take the grid as their first argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import circulant

__all__ = [
    "Grid",
    "make_grid",
    "inner",
    "norm",
    "transform",
    "inverse_transform",
    "apply_multiplier",
    "multiplier_matrix",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Grid:
    """Immutable periodic grid on [-half_length, half_length)."""

    half_length: float
    n: int
    spacing: float
    nodes: np.ndarray
    frequencies: np.ndarray

    def __post_init__(self) -> None:
        self.nodes.setflags(write=False)
        self.frequencies.setflags(write=False)


def make_grid(half_length: float, n: int) -> Grid:
    """Build the periodic grid with n nodes on [-half_length, half_length).

    The node set starts at -half_length with spacing 2*half_length/n, and the
    frequencies are the discrete Fourier frequencies in angular units, i.e.
    integer multiples of pi/half_length with the usual unpaired Nyquist mode.
    """
    if not isinstance(n, (int, np.integer)):
        raise TypeError(f"n must be an integer, got {type(n).__name__}")
    n = int(n)
    if n < 8 or n % 2 != 0:
        raise ValueError(f"n must be an even integer >= 8, got {n}")
    half_length = float(half_length)
    if not np.isfinite(half_length) or half_length <= 0.0:
        raise ValueError(f"half_length must be positive and finite, got {half_length}")
    spacing = 2.0 * half_length / n
    nodes = -half_length + spacing * np.arange(n)
    frequencies = 2.0 * np.pi * np.fft.fftfreq(n, d=spacing)
    return Grid(half_length, n, spacing, nodes, frequencies)


def _check_state(grid: Grid, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    if f.shape != (grid.n,):
        raise ValueError(f"state shape {f.shape} does not match grid with n={grid.n}")
    return f


def inner(grid: Grid, f: np.ndarray, g: np.ndarray) -> complex:
    """Spacing-weighted L2 pairing, conjugate-linear in the first slot."""
    f = _check_state(grid, f)
    g = _check_state(grid, g)
    return complex(grid.spacing * np.vdot(f, g))


def norm(grid: Grid, f: np.ndarray) -> float:
    f = _check_state(grid, f)
    return float(np.sqrt(grid.spacing) * np.linalg.norm(f))


def transform(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Discrete Fourier transform normalised so Parseval holds.

    With frequency measure 2*pi/(n*spacing) per mode, ``norm`` of the
    transform (taken with that measure) equals ``norm`` of the state.
    """
    f = _check_state(grid, f)
    return grid.spacing * np.fft.fft(f) / _SQRT_2PI


def inverse_transform(grid: Grid, fhat: np.ndarray) -> np.ndarray:
    fhat = _check_state(grid, fhat)
    return np.fft.ifft(fhat) * _SQRT_2PI / grid.spacing


def _symbol_values(grid: Grid, symbol) -> np.ndarray:
    vals = symbol(grid.frequencies) if callable(symbol) else symbol
    vals = np.asarray(vals)
    if vals.shape != (grid.n,):
        raise ValueError(
            f"symbol values shape {vals.shape} does not match grid with n={grid.n}"
        )
    if not np.all(np.isfinite(vals)):
        bad = grid.frequencies[~np.isfinite(vals)][:3]
        raise ValueError(f"symbol is not finite at frequencies {bad}")
    return vals


def apply_multiplier(grid: Grid, symbol, f: np.ndarray) -> np.ndarray:
    """Apply a function of momentum: ifft(symbol(frequencies) * fft(f)).

    ``symbol`` is either a callable evaluated on ``grid.frequencies`` or a
    precomputed array of length n.
    """
    f = _check_state(grid, f)
    vals = _symbol_values(grid, symbol)
    return np.fft.ifft(vals * np.fft.fft(f))


def multiplier_matrix(grid: Grid, symbol) -> np.ndarray:
    """Dense matrix of ``apply_multiplier`` for a fixed symbol.

    The matrix is circulant with first column ifft(symbol values).  When the
    symbol is real and even on the frequency set the matrix is real
    symmetric, and the tiny imaginary rounding residue is dropped so dense
    eigensolvers can take the real symmetric path.
    """
    vals = _symbol_values(grid, symbol)
    col = np.fft.ifft(vals)
    scale = max(1.0, float(np.max(np.abs(col.real))))
    if float(np.max(np.abs(col.imag))) <= 1e-13 * scale:
        col = col.real
    return circulant(col)
