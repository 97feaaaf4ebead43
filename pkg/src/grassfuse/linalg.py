"""Deterministic dense linear algebra kernels.

All public functions operate on float64 tensors, accept arbitrary leading
batch dimensions, and are deterministic given input bits: LAPACK drivers with
fixed conventions, no randomized algorithms.  Conventions fixed here and
relied on everywhere above:

  * qr_thin: thin QR with diag(R) >= 0, which makes the factorization unique
    for full-column-rank input (two calls on the same bits return the same
    bits).
  * svd_thin: singular values descending, nonnegative.
  * sym_eig: eigenvalues descending (callers index the dominant pair first).
  * spd_apply: symmetric matrix functions f(S) = V f(L) V^T with clamping of
    eigenvalues below SPD_FLOOR and hand-written reverse-mode derivatives
    (divided differences of f), finite even for repeated eigenvalues.  The
    library's own eigh backward is not used because it divides by eigenvalue
    gaps and returns NaN on exactly repeated spectra, which a learnable mean
    initialized at the identity hits on the first step.

Inputs are symmetrized (S + S^T)/2 at the boundary of every symmetric
operation; asymmetry beyond the stated tolerance is an error, drift below it
is repaired silently.
"""

from __future__ import annotations

import math
from typing import Callable

import torch

from .exceptions import (
    ConvergenceFailureError,
    DimensionMismatchError,
    NotPositiveDefiniteError,
    NotSymmetricError,
)

DTYPE = torch.float64

# Eigenvalues of SPD-constrained matrices are clamped up to this floor rather
# than aborting: mid-training inputs sit near the PSD boundary and a hard
# error would kill the run for a curable condition.
SPD_FLOOR = 1e-10

# Relative column-pivot threshold under which a QR factor is considered
# rank-deficient: min |R_ii| < RANK_TOL * ||A||_F.
RANK_TOL = 1e-12

_SYM_TOL = 1e-9

# Below this eigenvalue gap the divided difference (f(a)-f(b))/(a-b) is
# evaluated as f'((a+b)/2); the crossover keeps both branches accurate to
# well under the 1e-4 gradient tolerance used by the audits.
_DD_GAP = 1e-7

# Gram-kernel arguments below this use truncated series instead of the closed
# form; at the crossover both agree to ~1e-12 relative.
_SERIES_CUTOFF = 1e-4


def as_matrix(x) -> torch.Tensor:
    """Convert array-likes to a float64 tensor without copying tensors already in float64."""
    t = torch.as_tensor(x, dtype=DTYPE)
    return t


def symmetrize(s: torch.Tensor) -> torch.Tensor:
    return 0.5 * (s + s.transpose(-1, -2))


def _check_square(s: torch.Tensor, op: str) -> None:
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise DimensionMismatchError(f"{op} expects square matrices, got shape {tuple(s.shape)}")


def check_symmetric(s: torch.Tensor, op: str = "sym_eig") -> None:
    """Raise NotSymmetricError when ||S - S^T||_F > 1e-9 * ||S||_F."""
    _check_square(s, op)
    drift = torch.linalg.matrix_norm(s - s.transpose(-1, -2))
    norm = torch.linalg.matrix_norm(s)
    if bool((drift > _SYM_TOL * torch.clamp(norm, min=1.0)).any()):
        raise NotSymmetricError(
            f"{op}: asymmetry {float(drift.max()):.3e} exceeds {_SYM_TOL:g} * ||S||_F"
        )


def qr_thin(a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Thin QR of (..., m, n) with m >= n and the diag(R) >= 0 convention.

    Returns (Q, R) with Q (..., m, n) orthonormal columns and R upper
    triangular with nonnegative diagonal.  Columns whose R pivot is exactly
    zero keep a + sign.  Differentiable through torch's QR backward; the sign
    fix is piecewise constant.
    """
    if a.ndim < 2:
        raise DimensionMismatchError(f"qr_thin expects a matrix, got shape {tuple(a.shape)}")
    m, n = a.shape[-2], a.shape[-1]
    if m < n:
        raise DimensionMismatchError(f"qr_thin requires m >= n, got {m} x {n}")
    q, r = torch.linalg.qr(a, mode="reduced")
    d = torch.diagonal(r, dim1=-2, dim2=-1)
    sign = torch.where(d < 0, -torch.ones_like(d), torch.ones_like(d))
    q = q * sign.unsqueeze(-2)
    r = r * sign.unsqueeze(-1)
    return q, r


def qr_is_rank_deficient(r: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Boolean per batch item: smallest |R_ii| below RANK_TOL * ||A||_F."""
    d = torch.diagonal(r, dim1=-2, dim2=-1).abs()
    scale = torch.linalg.matrix_norm(a)
    return d.min(dim=-1).values < RANK_TOL * torch.clamp(scale, min=1e-300)


def svd_thin(a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Thin SVD (..., m, n) -> U (..., m, k), S (..., k) descending, V (..., n, k)."""
    if a.ndim < 2:
        raise DimensionMismatchError(f"svd_thin expects a matrix, got shape {tuple(a.shape)}")
    try:
        u, s, vh = torch.linalg.svd(a, full_matrices=False)
    except torch.linalg.LinAlgError as exc:  # pragma: no cover - driver failure
        raise ConvergenceFailureError(f"svd_thin failed to converge: {exc}") from exc
    return u, s, vh.transpose(-1, -2)


def sym_eig(s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Checks the symmetry precondition, symmetrizes, and returns
    (eigvals (..., n), eigvecs (..., n, n)) with columns ordered to match.
    """
    check_symmetric(s, "sym_eig")
    lam, v = torch.linalg.eigh(symmetrize(s))
    return lam.flip(-1), v.flip(-1)


# --- symmetric matrix functions with divided-difference derivatives ---------

# Each entry maps eigenvalues to (f(lam), f'(lam)) elementwise, applying any
# domain clamping internally so the derivative of the clamped region is zero.


def _clamped(lam: torch.Tensor, floor: float) -> tuple[torch.Tensor, torch.Tensor]:
    lc = torch.clamp(lam, min=floor)
    mask = (lam > floor).to(lam.dtype)
    return lc, mask


def _fn_sqrt(lam, _):
    lc, m = _clamped(lam, SPD_FLOOR)
    f = torch.sqrt(lc)
    return f, m * 0.5 / f


def _fn_inv_sqrt(lam, _):
    lc, m = _clamped(lam, SPD_FLOOR)
    f = lc.pow(-0.5)
    return f, m * (-0.5) * lc.pow(-1.5)


def _fn_log(lam, _):
    lc, m = _clamped(lam, SPD_FLOOR)
    return torch.log(lc), m / lc


def _fn_exp(lam, _):
    f = torch.exp(lam)
    return f, f


def _fn_pow(lam, w):
    lc, m = _clamped(lam, SPD_FLOOR)
    return lc.pow(w), m * w * lc.pow(w - 1.0)


def _fn_cos_sqrt(lam, _):
    # f(x) = cos(sqrt(x)) for x >= 0; derivative -sin(sqrt x)/(2 sqrt x).
    x = torch.clamp(lam, min=0.0)
    small = x < _SERIES_CUTOFF
    xs = torch.where(small, x, torch.zeros_like(x))
    f_series = 1 - xs / 2 + xs**2 / 24 - xs**3 / 720
    df_series = -0.5 + xs / 12 - xs**2 / 240
    u = torch.sqrt(torch.where(small, torch.ones_like(x), x))
    f_closed = torch.cos(u)
    df_closed = -torch.sin(u) / (2 * u)
    f = torch.where(small, f_series, f_closed)
    df = torch.where(small, df_series, df_closed)
    df = torch.where(lam < 0, torch.zeros_like(df), df)
    return f, df


def _fn_sinc_sqrt(lam, _):
    # f(x) = sin(sqrt x)/sqrt x for x >= 0, f(0) = 1.
    x = torch.clamp(lam, min=0.0)
    small = x < _SERIES_CUTOFF
    xs = torch.where(small, x, torch.zeros_like(x))
    f_series = 1 - xs / 6 + xs**2 / 120 - xs**3 / 5040
    df_series = -1.0 / 6.0 + xs / 60 - xs**2 / 1680
    xsafe = torch.where(small, torch.ones_like(x), x)
    u = torch.sqrt(xsafe)
    f_closed = torch.sin(u) / u
    df_closed = (u * torch.cos(u) - torch.sin(u)) / (2 * xsafe * u)
    f = torch.where(small, f_series, f_closed)
    df = torch.where(small, df_series, df_closed)
    df = torch.where(lam < 0, torch.zeros_like(df), df)
    return f, df


def _fn_atan_sqrt(lam, _):
    # f(x) = arctan(sqrt x)/sqrt x for x >= 0, f(0) = 1.
    x = torch.clamp(lam, min=0.0)
    small = x < _SERIES_CUTOFF
    xs = torch.where(small, x, torch.zeros_like(x))
    f_series = 1 - xs / 3 + xs**2 / 5 - xs**3 / 7
    df_series = -1.0 / 3.0 + 2 * xs / 5 - 3 * xs**2 / 7
    xsafe = torch.where(small, torch.ones_like(x), x)
    u = torch.sqrt(xsafe)
    f_closed = torch.atan(u) / u
    df_closed = (1.0 / (1.0 + xsafe) - f_closed) / (2 * xsafe)
    f = torch.where(small, f_series, f_closed)
    df = torch.where(small, df_series, df_closed)
    df = torch.where(lam < 0, torch.zeros_like(df), df)
    return f, df


_SCALAR_FNS: dict[str, Callable] = {
    "sqrt": _fn_sqrt,
    "inv_sqrt": _fn_inv_sqrt,
    "log": _fn_log,
    "exp": _fn_exp,
    "pow": _fn_pow,
    "cos_sqrt": _fn_cos_sqrt,
    "sinc_sqrt": _fn_sinc_sqrt,
    "atan_sqrt": _fn_atan_sqrt,
}

_NEEDS_SPD = {"sqrt", "inv_sqrt", "log", "pow"}


class _SymMatrixFn(torch.autograd.Function):
    """Y = V f(L) V^T for symmetric S = V L V^T, with divided-difference VJP.

    Backward: dL/dS = V (G .* sym(V^T dL/dY V)) V^T where
    G_ij = (f(l_i) - f(l_j)) / (l_i - l_j), diagonal f'(l_i), evaluated as the
    midpoint derivative when the gap is tiny.  Finite for repeated spectra.
    """

    @staticmethod
    def forward(ctx, s, kind, aux):
        lam, v = torch.linalg.eigh(symmetrize(s))
        f, df = _SCALAR_FNS[kind](lam, aux)
        y = symmetrize(v @ (f.unsqueeze(-1) * v.transpose(-1, -2)))
        ctx.save_for_backward(lam, v, f, df)
        return y

    @staticmethod
    def backward(ctx, grad_y):
        lam, v, f, df = ctx.saved_tensors
        li = lam.unsqueeze(-1)
        lj = lam.unsqueeze(-2)
        fi = f.unsqueeze(-1)
        fj = f.unsqueeze(-2)
        gap = li - lj
        scale = 1.0 + li.abs() + lj.abs()
        wide = gap.abs() > _DD_GAP * scale
        dd = torch.where(wide, (fi - fj) / torch.where(wide, gap, torch.ones_like(gap)),
                         0.5 * (df.unsqueeze(-1) + df.unsqueeze(-2)))
        inner = symmetrize(v.transpose(-1, -2) @ grad_y @ v)
        grad_s = v @ (dd * inner) @ v.transpose(-1, -2)
        return symmetrize(grad_s), None, None


class _SymMatrixMultiFn(torch.autograd.Function):
    """Several scalar functions of one symmetric matrix from a single eigh.

    Same contract as _SymMatrixFn but returns one output per requested
    function; the backward accumulates every output's divided-difference VJP
    against the shared spectrum.
    """

    @staticmethod
    def forward(ctx, s, kinds, aux):
        lam, v = torch.linalg.eigh(symmetrize(s))
        vt = v.transpose(-1, -2)
        outs = []
        fs = []
        dfs = []
        for kind in kinds:
            f, df = _SCALAR_FNS[kind](lam, aux)
            outs.append(symmetrize(v @ (f.unsqueeze(-1) * vt)))
            fs.append(f)
            dfs.append(df)
        ctx.save_for_backward(lam, v, torch.stack(fs), torch.stack(dfs))
        return tuple(outs)

    @staticmethod
    def backward(ctx, *grad_ys):
        lam, v, fs, dfs = ctx.saved_tensors
        li = lam.unsqueeze(-1)
        lj = lam.unsqueeze(-2)
        gap = li - lj
        scale = 1.0 + li.abs() + lj.abs()
        wide = gap.abs() > _DD_GAP * scale
        safe_gap = torch.where(wide, gap, torch.ones_like(gap))
        vt = v.transpose(-1, -2)
        grad_s = None
        for i, grad_y in enumerate(grad_ys):
            if grad_y is None:
                continue
            f = fs[i]
            df = dfs[i]
            dd = torch.where(
                wide,
                (f.unsqueeze(-1) - f.unsqueeze(-2)) / safe_gap,
                0.5 * (df.unsqueeze(-1) + df.unsqueeze(-2)),
            )
            inner = symmetrize(vt @ grad_y @ v)
            g = v @ (dd * inner) @ vt
            grad_s = g if grad_s is None else grad_s + g
        return None if grad_s is None else symmetrize(grad_s), None, None


def spd_apply_multi(
    s: torch.Tensor, fns: tuple[str, ...], exponent: float | None = None
) -> tuple[torch.Tensor, ...]:
    """Apply several scalar functions to one symmetric matrix, sharing the eigh.

    Equivalent to tuple(spd_apply(s, fn) for fn in fns) at roughly the cost
    of a single call; use wherever a hot path needs e.g. both the square root
    and the inverse square root of the same matrix.
    """
    for fn in fns:
        if fn not in _SCALAR_FNS:
            raise ValueError(f"spd_apply_multi: unknown function {fn!r}")
        if fn == "pow" and exponent is None:
            raise ValueError("spd_apply_multi: pow requires an exponent")
    check_symmetric(s, f"spd_apply_multi{list(fns)}")
    return _SymMatrixMultiFn.apply(s, tuple(fns), exponent)


def spd_apply(
    s: torch.Tensor,
    fn: str,
    exponent: float | None = None,
    return_clamped: bool = False,
    strict: bool = False,
):
    """Apply a scalar function to a symmetric (SPD where required) matrix.

    fn is one of sqrt, inv_sqrt, log, exp, pow (with `exponent`), or the Gram
    kernels cos_sqrt / sinc_sqrt / atan_sqrt used by the manifold maps.
    SPD-requiring functions clamp eigenvalues below SPD_FLOOR up to the floor;
    with return_clamped=True a (result, clamped) pair is returned, and with
    strict=True sub-floor eigenvalues raise NotPositiveDefiniteError instead
    of being clamped.
    """
    if fn not in _SCALAR_FNS:
        raise ValueError(f"spd_apply: unknown function {fn!r}")
    if fn == "pow" and exponent is None:
        raise ValueError("spd_apply: pow requires an exponent")
    check_symmetric(s, f"spd_apply[{fn}]")
    clamped = False
    if (strict or return_clamped) and fn in _NEEDS_SPD:
        with torch.no_grad():
            lam_min = torch.linalg.eigvalsh(symmetrize(s))[..., 0]
            clamped = bool((lam_min < SPD_FLOOR).any())
        if strict and clamped:
            raise NotPositiveDefiniteError(
                f"spd_apply[{fn}]: eigenvalue {float(lam_min.min()):.3e} below floor {SPD_FLOOR:g}"
            )
    out = _SymMatrixFn.apply(s, fn, exponent)
    if return_clamped:
        return out, clamped
    return out


def spd_clamp(s: torch.Tensor, floor: float = SPD_FLOOR) -> tuple[torch.Tensor, bool]:
    """Eigenvalue-clamp a symmetric matrix up to `floor`; non-differentiable repair."""
    check_symmetric(s, "spd_clamp")
    with torch.no_grad():
        lam, v = torch.linalg.eigh(symmetrize(s))
        clamped = bool((lam < floor).any())
        if clamped:
            lam = torch.clamp(lam, min=floor)
            s = symmetrize(v @ (lam.unsqueeze(-1) * v.transpose(-1, -2)))
        return s, clamped


def spd_sqrt_and_inv_sqrt(s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Both S^{1/2} and S^{-1/2} from one eigendecomposition."""
    root, inv_root = spd_apply_multi(s, ("sqrt", "inv_sqrt"))
    return root, inv_root


def check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise ConvergenceFailureError(f"{what} contains non-finite entries")


def frobenius(t: torch.Tensor) -> torch.Tensor:
    return torch.linalg.matrix_norm(t)


def set_single_thread() -> None:
    """Pin intra-op parallelism to one thread for reproducible training runs."""
    try:
        torch.set_num_threads(1)
    except RuntimeError:  # pragma: no cover - already pinned by the host
        pass


def machine_seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g
