"""Operator constructions: H = Delta + V, conjugate operators, weights, H(F).

All operators are wrapped in :class:`OperatorRep`, which carries a pure
``apply`` closure, a hermiticity flag, and a lazily materialised dense matrix
(available for n <= 4096).  Odd momentum symbols are zeroed at the unpaired
Nyquist mode so that the resulting matrices are exactly Hermitian and, for
real states, quadratic forms of the momentum-antisymmetric pieces vanish to
rounding; the even Laplacian symbol keeps its Nyquist component.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import eigh

from .grid import Grid, apply_multiplier, multiplier_matrix, norm

__all__ = [
    "OperatorRep",
    "ConjugateSpec",
    "WeightSpec",
    "build_hamiltonian",
    "build_conjugate",
    "commutator",
    "multiplication_operator",
    "weight_field",
    "conjugated_hamiltonian",
    "apply_similarity_conjugation",
    "weighted_state",
    "spectral_projector",
]

DENSE_LIMIT = 4096


class OperatorRep:
    """A linear operator on grid states: pure matvec plus optional dense form.

    The dense matrix and the eigendecomposition (for Hermitian operators) are
    materialised at most once each, under a lock, so concurrent callers
    observe a single initialisation.
    """

    def __init__(
        self,
        grid: Grid,
        apply: Callable[[np.ndarray], np.ndarray],
        hermitian: bool,
        dense: np.ndarray | None = None,
        dense_builder: Callable[[], np.ndarray] | None = None,
        label: str = "",
        meta: dict | None = None,
    ):
        self.grid = grid
        self._apply = apply
        self.hermitian = bool(hermitian)
        self.label = label
        self.meta = {} if meta is None else meta
        self._dense = dense
        self._dense_builder = dense_builder
        self._eigensystem: tuple[np.ndarray, np.ndarray] | None = None
        self._lock = threading.RLock()

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self._apply(np.asarray(f))

    def dense(self) -> np.ndarray:
        if self._dense is None:
            with self._lock:
                if self._dense is None:
                    if self.grid.n > DENSE_LIMIT:
                        raise RuntimeError(
                            f"dense materialization unavailable for n = "
                            f"{self.grid.n} > {DENSE_LIMIT}"
                        )
                    if self._dense_builder is not None:
                        self._dense = self._dense_builder()
                    else:
                        eye = np.eye(self.grid.n)
                        cols = [self._apply(eye[:, j]) for j in range(self.grid.n)]
                        self._dense = np.stack(cols, axis=1)
        return self._dense

    def eigensystem(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues (ascending) and eigenvector columns of a Hermitian op."""
        if not self.hermitian:
            raise ValueError(f"operator {self.label!r} is not flagged Hermitian")
        if self._eigensystem is None:
            with self._lock:
                if self._eigensystem is None:
                    mat = self.dense() if self._dense is None else self._dense
                    vals, vecs = eigh(mat, check_finite=False)
                    self._eigensystem = (vals, vecs)
        return self._eigensystem


def momentum_symbol(grid: Grid) -> np.ndarray:
    """Grid frequencies with the unpaired Nyquist mode removed (odd symbol)."""
    xi = grid.frequencies.copy()
    xi[grid.n // 2] = 0.0
    return xi


def build_hamiltonian(v_field: np.ndarray, grid: Grid) -> OperatorRep:
    """H = Delta + V with the nonnegative Laplacian (symbol xi^2)."""
    v_field = np.asarray(v_field, dtype=float)
    if v_field.shape != (grid.n,):
        raise ValueError(
            f"potential shape {v_field.shape} does not match grid n={grid.n}"
        )
    xi_sq = grid.frequencies**2

    def apply(f: np.ndarray) -> np.ndarray:
        return apply_multiplier(grid, xi_sq, f) + v_field * f

    def dense_builder() -> np.ndarray:
        return multiplier_matrix(grid, xi_sq) + np.diag(v_field)

    return OperatorRep(
        grid,
        apply,
        hermitian=True,
        dense_builder=dense_builder,
        label="H",
        meta={"potential": v_field.copy()},
    )


@dataclass(frozen=True)
class ConjugateSpec:
    """Momentum vector-field spec for A = (u(p) q + q u(p)) / 2, u = xi*lambda.

    Presets: ``dilation`` has lambda = 1 (the dilation generator) and
    ``bounded_standard`` has lambda = (1 + xi^2)^(-1/2), which makes u
    bounded.  A ``custom`` spec must provide callables for lambda and its
    derivative; both are validated for positivity and boundedness on the
    grid frequencies only.
    """

    preset: str = "dilation"
    lambda_symbol: Callable[[np.ndarray], np.ndarray] | None = None
    lambda_deriv: Callable[[np.ndarray], np.ndarray] | None = None


def _resolve_lambda(spec: ConjugateSpec, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if spec.preset == "dilation":
        return np.ones_like(xi), np.zeros_like(xi)
    if spec.preset == "bounded_standard":
        sq = 1.0 + xi * xi
        return sq ** (-0.5), -xi * sq ** (-1.5)
    if spec.preset == "custom":
        if spec.lambda_symbol is None or spec.lambda_deriv is None:
            raise ValueError(
                "custom conjugate spec needs lambda_symbol and lambda_deriv"
            )
        lam = np.asarray(spec.lambda_symbol(xi), dtype=float)
        lamp = np.asarray(spec.lambda_deriv(xi), dtype=float)
        return lam, lamp
    raise ValueError(f"unknown conjugate preset {spec.preset!r}")


def build_conjugate(spec: ConjugateSpec, grid: Grid) -> OperatorRep:
    """A = (u(p) q + q u(p)) / 2 with u(xi) = xi * lambda(xi).

    The symmetrised composition is exactly Hermitian on the grid.  The
    equivalent normal form u(p) q + (i/2) (div u)(p) holds only up to a
    discretisation residual and is exposed through the stored symbol arrays
    in ``meta`` (u, div_u, lambda, lambda_deriv) for the diagnostics that
    need them.
    """
    xi = momentum_symbol(grid)
    lam, lamp = _resolve_lambda(spec, grid.frequencies)
    if not np.all(np.isfinite(lam)) or not np.all(np.isfinite(lamp)):
        raise ValueError("lambda or its derivative is not finite on grid frequencies")
    if np.any(lam <= 0.0):
        raise ValueError("lambda must be positive on all grid frequencies")
    u_vals = xi * lam
    divu_vals = lam + grid.frequencies * lamp
    q = grid.nodes

    def apply(f: np.ndarray) -> np.ndarray:
        return 0.5 * (
            apply_multiplier(grid, u_vals, q * f)
            + q * apply_multiplier(grid, u_vals, f)
        )

    def dense_builder() -> np.ndarray:
        u_mat = multiplier_matrix(grid, u_vals)
        qu = u_mat * q[np.newaxis, :]
        uq = q[:, np.newaxis] * u_mat
        return 0.5 * (qu + uq)

    return OperatorRep(
        grid,
        apply,
        hermitian=True,
        dense_builder=dense_builder,
        label=f"A[{spec.preset}]",
        meta={
            "u": u_vals,
            "div_u": divu_vals,
            "lambda": lam,
            "lambda_deriv": lamp,
            "preset": spec.preset,
        },
    )


def multiplication_operator(
    values: np.ndarray, grid: Grid, label: str = "M"
) -> OperatorRep:
    """Pointwise multiplication by a real field, as an OperatorRep."""
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n,):
        raise ValueError(
            f"field shape {values.shape} does not match grid n={grid.n}"
        )
    return OperatorRep(
        grid,
        lambda f: values * np.asarray(f),
        hermitian=True,
        dense_builder=lambda: np.diag(values),
        label=label,
        meta={"field": values.copy()},
    )


def commutator(a: OperatorRep, b: OperatorRep, scale_i: bool = False) -> OperatorRep:
    """[A, B] = AB - BA, optionally multiplied by i (Hermitian when both are)."""
    if a.grid is not b.grid and (
        a.grid.n != b.grid.n or a.grid.half_length != b.grid.half_length
    ):
        raise ValueError("commutator operands live on different grids")
    factor = 1j if scale_i else 1.0

    def apply(f: np.ndarray) -> np.ndarray:
        return factor * (a.apply(b.apply(f)) - b.apply(a.apply(f)))

    def dense_builder() -> np.ndarray:
        da, db = a.dense(), b.dense()
        return factor * (da @ db - db @ da)

    return OperatorRep(
        a.grid,
        apply,
        hermitian=bool(scale_i and a.hermitian and b.hermitian),
        dense_builder=dense_builder,
        label=f"{'i' if scale_i else ''}[{a.label},{b.label}]",
    )


@dataclass(frozen=True)
class WeightSpec:
    """Conjugation weight family.

    ``log_type`` is F = tau * ln(<x> / (1 + eps <x>)), bounded above.
    ``subexp`` is F = alpha <x>^beta + tau * ln(1 + gamma <x>^beta / tau);
    gamma = 0 gives the pure sub-exponential weight alpha <x>^beta.
    """

    kind: str
    tau: float = 1.0
    eps: float = 1.0
    alpha: float = 0.0
    beta: float = 0.5
    gamma: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("log_type", "subexp"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.tau <= 0.0:
            raise ValueError(f"weight needs tau > 0, got {self.tau}")
        if self.kind == "log_type":
            if self.eps <= 0.0:
                raise ValueError(f"log_type weight needs eps > 0, got {self.eps}")
        else:
            if not 0.0 < self.beta < 1.0:
                raise ValueError(f"subexp weight needs beta in (0, 1), got {self.beta}")
            if self.alpha < 0.0 or self.gamma < 0.0:
                raise ValueError(
                    f"subexp weight needs alpha >= 0 and gamma >= 0, "
                    f"got alpha={self.alpha}, gamma={self.gamma}"
                )


def weight_field(
    spec: WeightSpec, grid: Grid
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sample (F, grad F, g, Delta F) with grad F = x * g pointwise.

    Delta F uses the same nonnegative-Laplacian sign convention as H, i.e.
    the returned field is -F''.  All four fields come from closed-form
    derivatives of the chosen family, not numerical differentiation.
    """
    x = grid.nodes
    bra = np.sqrt(1.0 + x * x)
    if spec.kind == "log_type":
        tau, eps = spec.tau, spec.eps
        f_vals = tau * (np.log(bra) - np.log1p(eps * bra))
        g_vals = tau / (bra**2 * (1.0 + eps * bra))
        xgp = -tau * x**2 * (
            2.0 / (bra**4 * (1.0 + eps * bra)) + eps / (bra**3 * (1.0 + eps * bra) ** 2)
        )
    else:
        alpha, beta, tau, gamma = spec.alpha, spec.beta, spec.tau, spec.gamma
        f_vals = alpha * bra**beta + tau * np.log1p(gamma * bra**beta / tau)
        rat = gamma * tau / (tau + gamma * bra**beta)
        g_vals = beta * bra ** (beta - 2.0) * (alpha + rat)
        xgp = beta * (beta - 2.0) * x**2 * bra ** (beta - 4.0) * (alpha + rat) - (
            gamma**2 * tau * beta**2 * x**2 * bra ** (2.0 * beta - 4.0)
        ) / (tau + gamma * bra**beta) ** 2
    grad_f = x * g_vals
    lapl_f = -(g_vals + xgp)
    return f_vals, grad_f, g_vals, lapl_f


def conjugated_hamiltonian(
    h: OperatorRep, spec: WeightSpec, grid: Grid
) -> OperatorRep:
    """H(F) = H - (grad F)^2 + i (p gradF + gradF p), built in closed form.

    The closed form never exponentiates F, so arbitrarily strong weights are
    representable; ``apply_similarity_conjugation`` provides the similarity
    product e^F H e^{-F} as a cross-check at moderate weights.  The result
    is non-Hermitian whenever grad F is not identically zero.
    """
    f_vals, grad_f, _, _ = weight_field(spec, grid)
    xi = momentum_symbol(grid)
    grad_sq = grad_f * grad_f
    zero_weight = bool(np.all(grad_f == 0.0))

    def apply(f: np.ndarray) -> np.ndarray:
        out = h.apply(f) - grad_sq * f
        if not zero_weight:
            out = out + 1j * (
                apply_multiplier(grid, xi, grad_f * f)
                + grad_f * apply_multiplier(grid, xi, f)
            )
        return out

    def dense_builder() -> np.ndarray:
        base = h.dense() - np.diag(grad_sq)
        if zero_weight:
            return base.copy()
        p_mat = multiplier_matrix(grid, xi)
        return base + 1j * (p_mat * grad_f[np.newaxis, :] + grad_f[:, np.newaxis] * p_mat)

    return OperatorRep(
        grid,
        apply,
        hermitian=zero_weight and h.hermitian,
        dense_builder=dense_builder,
        label="H(F)",
        meta={"F": f_vals, "gradF": grad_f, "weight": spec},
    )


def apply_similarity_conjugation(
    h: OperatorRep, spec: WeightSpec, grid: Grid, f: np.ndarray
) -> np.ndarray:
    """Compute e^F H e^{-F} f directly; raises on overflow in e^{+/-F}.

    Only usable at moderate weights; this is the cross-check counterpart of
    ``conjugated_hamiltonian``, not a construction path.
    """
    f_vals, _, _, _ = weight_field(spec, grid)
    with np.errstate(over="raise"):
        try:
            up = np.exp(f_vals)
            down = np.exp(-f_vals)
        except FloatingPointError:
            worst = int(np.argmax(np.abs(f_vals)))
            raise OverflowError(
                f"e^F overflows at node index {worst} "
                f"(x = {grid.nodes[worst]:.6g}, F = {f_vals[worst]:.6g})"
            ) from None
    return up * h.apply(down * np.asarray(f))


def weighted_state(grid: Grid, f_vals: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Normalised e^F psi, computed stably by shifting F to peak at zero."""
    shifted = np.exp(f_vals - np.max(f_vals))
    out = shifted * psi
    scale = norm(grid, out)
    if scale == 0.0 or not np.isfinite(scale):
        raise ValueError("weighted state vanished or overflowed; weight too strong")
    return out / scale


def spectral_projector(h: OperatorRep, interval: tuple[float, float]) -> OperatorRep:
    """E(I): orthogonal projector onto eigenvectors with eigenvalue in I.

    The interval is closed on both ends.  Requires the dense Hermitian path.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not lo <= hi:
        raise ValueError(f"empty interval ({lo}, {hi})")
    vals, vecs = h.eigensystem()
    sel = (vals >= lo) & (vals <= hi)
    cols = vecs[:, sel]
    proj = cols @ cols.conj().T

    return OperatorRep(
        h.grid,
        lambda f: cols @ (cols.conj().T @ np.asarray(f)),
        hermitian=True,
        dense=proj,
        label=f"E[{lo},{hi}]",
        meta={"rank": int(np.count_nonzero(sel)), "interval": (lo, hi)},
    )
