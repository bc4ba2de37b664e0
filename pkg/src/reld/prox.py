"""Exact solvers for the quadratic data subproblem of the splitting loop.

All routines minimize

    0.5 * ||A t - b||^2 + (mu/2) * ||t - r||^2

over the image t, where r is the anchor produced by the generative prior.
For circular convolution the minimizer has a closed form in the Fourier
domain; for decimated convolution (super-resolution) the normal equations are
inverted in O(n log n) through the Woodbury identity

    (H^T S^T S H + mu I)^-1 = (1/mu) [I - H^T S^T (mu I + S H H^T S^T)^-1 S H]

where S H H^T S^T is diagonal in the low-resolution Fourier basis with
eigenvalues equal to the mean of |Ahat|^2 over the d x d aliasing blocks.
A conjugate-gradient fallback covers any operator with an exact adjoint.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .linop import Compose, Decimate, Identity, LinearOperator, PeriodicConv, transfer_function

__all__ = [
    "ProxProblem",
    "UnsupportedOperatorError",
    "prox_deblur_fft",
    "prox_sr_fft",
    "prox_cg",
    "CGResult",
    "optimality_residual",
]


class UnsupportedOperatorError(ValueError):
    """Raised when a closed-form solver is asked for an operator it cannot handle."""


@dataclass
class ProxProblem:
    operator: LinearOperator
    observation: np.ndarray  # b, in the operator's output space
    anchor: np.ndarray       # r, in the operator's input space
    mu: float

    def __post_init__(self) -> None:
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        self.observation = np.asarray(self.observation, dtype=np.float64)
        self.anchor = np.asarray(self.anchor, dtype=np.float64)
        op = self.operator
        if self.observation.shape[:2] != op.output_shape:
            raise ValueError(
                f"observation spatial shape {self.observation.shape[:2]} != operator output {op.output_shape}"
            )
        if self.anchor.shape[:2] != op.input_shape:
            raise ValueError(
                f"anchor spatial shape {self.anchor.shape[:2]} != operator input {op.input_shape}"
            )


def _fft2(x: np.ndarray) -> np.ndarray:
    return np.fft.fft2(x, axes=(0, 1))


def _ifft2(x: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(x, axes=(0, 1)).real


def _bc(spec: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast a 2-D spectrum over the channel axis when present."""
    return spec[:, :, None] if like.ndim == 3 else spec


def prox_deblur_fft(problem: ProxProblem) -> np.ndarray:
    """Closed-form minimizer for a periodic-convolution operator.

    t = F^-1[ (conj(Ahat) F(b) + mu F(r)) / (|Ahat|^2 + mu) ]
    """
    op = problem.operator
    if not isinstance(op, PeriodicConv):
        raise UnsupportedOperatorError(f"prox_deblur_fft requires PeriodicConv, got {op!r}")
    ahat = op.transfer_function()
    b, r, mu = problem.observation, problem.anchor, problem.mu
    numer = np.conj(_bc(ahat, b)) * _fft2(b) + mu * _fft2(r)
    denom = _bc(np.abs(ahat) ** 2, b) + mu
    return _ifft2(numer / denom)


def _sr_parts(op: LinearOperator) -> tuple[int, np.ndarray | None]:
    """Extract (decimation factor, blur kernel or None) from an SR operator."""
    if isinstance(op, Decimate):
        return op.factor, None
    if isinstance(op, Compose) and isinstance(op.outer, Decimate):
        if isinstance(op.inner, PeriodicConv):
            return op.outer.factor, op.inner.kernel
        if isinstance(op.inner, Identity):
            return op.outer.factor, None
    raise UnsupportedOperatorError(
        f"prox_sr_fft requires Decimate or Compose(Decimate, PeriodicConv|Identity), got {op!r}"
    )


def _block_mean(spec: np.ndarray, d: int) -> np.ndarray:
    """Mean over the d x d aliasing blocks of a full-grid spectrum."""
    h, w = spec.shape[:2]
    mh, mw = h // d, w // d
    blocks = spec.reshape((d, mh, d, mw) + spec.shape[2:])
    return blocks.mean(axis=(0, 2))


def _tile(spec: np.ndarray, d: int) -> np.ndarray:
    reps = (d, d) + (1,) * (spec.ndim - 2)
    return np.tile(spec, reps)


def prox_sr_fft(problem: ProxProblem, d: int | None = None) -> np.ndarray:
    """Closed-form minimizer for blur-then-decimate operators via Woodbury."""
    op = problem.operator
    factor, kernel = _sr_parts(op)
    if d is not None and int(d) != factor:
        raise ValueError(f"given d={d} does not match operator factor {factor}")
    d = factor
    h, w = op.input_shape
    b, r, mu = problem.observation, problem.anchor, problem.mu

    if kernel is None:
        ahat = np.ones((h, w), dtype=np.complex128)
    else:
        ahat = transfer_function(kernel, (h, w))

    # S^T b zero-fills onto the reconstruction grid
    sty = np.zeros((h, w) + b.shape[2:], dtype=np.float64)
    sty[::d, ::d] = b

    q = np.conj(_bc(ahat, r)) * _fft2(sty) + mu * _fft2(r)
    eig = _block_mean(np.abs(ahat) ** 2, d)  # eigenvalues of S H H^T S^T
    correction = _block_mean(_bc(ahat, r) * q, d) / (_bc(eig, r) + mu)
    ft = (q - np.conj(_bc(ahat, r)) * _tile(correction, d)) / mu
    return _ifft2(ft)


@dataclass
class CGResult:
    image: np.ndarray
    rel_residual: float
    iterations: int
    converged: bool


def prox_cg(problem: ProxProblem, tol: float = 1e-10, max_iter: int = 500) -> CGResult:
    """Conjugate gradients on the normal equations, started from the anchor.

    Solves (A^T A + mu I) t = A^T b + mu r; stops when the residual norm drops
    below ``tol`` times the right-hand side norm.  On non-convergence a
    warning is emitted and the lowest-residual iterate is returned.
    """
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    op, b, r, mu = problem.operator, problem.observation, problem.anchor, problem.mu

    def matvec(t: np.ndarray) -> np.ndarray:
        return op.adjoint(op.apply(t)) + mu * t

    rhs = op.adjoint(b) + mu * r
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return CGResult(np.zeros_like(r), 0.0, 0, True)

    x = r.copy()
    res = rhs - matvec(x)
    p = res.copy()
    rs = float(np.vdot(res, res).real)
    best_x, best_res = x.copy(), np.sqrt(rs)
    k = 0
    while np.sqrt(rs) / rhs_norm > tol and k < max_iter:
        ap = matvec(p)
        alpha = rs / float(np.vdot(p, ap).real)
        x = x + alpha * p
        res = res - alpha * ap
        rs_new = float(np.vdot(res, res).real)
        k += 1
        if np.sqrt(rs_new) < best_res:
            best_x, best_res = x.copy(), np.sqrt(rs_new)
        p = res + (rs_new / rs) * p
        rs = rs_new

    rel = best_res / rhs_norm
    converged = rel <= tol
    if not converged:
        warnings.warn(
            f"prox_cg did not reach tol={tol} in {max_iter} iterations (rel residual {rel:.3e})",
            RuntimeWarning,
        )
    return CGResult(best_x, rel, k, converged)


def optimality_residual(problem: ProxProblem, t: np.ndarray) -> float:
    """Normalized first-order optimality residual of the subproblem at t."""
    op, b, r, mu = problem.operator, problem.observation, problem.anchor, problem.mu
    grad = op.adjoint(op.apply(t) - b) + mu * (t - r)
    scale = float(np.linalg.norm(op.adjoint(b))) + mu * float(np.linalg.norm(r))
    return float(np.linalg.norm(grad)) / max(scale, np.finfo(float).tiny)
