"""Grassmannian geometry: points as orthonormal bases, n x p with p <= n.

A point on G(n, p) is represented by a float64 tensor with orthonormal
columns; all functions accept arbitrary leading batch dimensions and return
bare tensors.  `grassmann_point` is the validating constructor: it checks
shape and orthonormality drift and re-orthonormalizes via qr_thin when drift
exceeds REPAIR_TOL.

Distance is the projection metric d(U1, U2) = 2^{-1/2} ||U1 U1^T - U2 U2^T||_F,
computed through the p x p cross-Gram identity d^2 = p - ||U1^T U2||_F^2 so
the n x n projectors are never formed.  The exponential and logarithm use the
standard principal-angle formulas; they are evaluated as analytic matrix
functions of the p x p Gram matrices (cos sqrt / sinc sqrt / arctan sqrt of
D^T D and M^T M), which is algebraically identical to the thin-SVD form but
keeps reverse-mode derivatives finite when singular values collide or vanish,
as they always do near a Karcher fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import linalg
from .exceptions import (
    CutLocusError,
    DimensionMismatchError,
    EmptyBatchError,
    EmptyResultError,
    InvalidPError,
)

# Orthonormality drift beyond this is repaired by the constructor; beyond
# CHECK_TOL the repaired point is still accepted (QR fixes any full-rank
# input), the tolerance only decides whether repair runs at all.
REPAIR_TOL = 1e-10

# Smallest singular value of U^T Y below which log_map refuses: the input
# pair straddles the cut locus and the principal-angle inverse is undefined.
CUT_LOCUS_TOL = 1e-8


def _check_basis_shape(u: torch.Tensor, op: str) -> tuple[int, int]:
    if u.ndim < 2:
        raise DimensionMismatchError(f"{op}: expected an n x p basis, got shape {tuple(u.shape)}")
    n, p = u.shape[-2], u.shape[-1]
    if p < 1:
        raise InvalidPError(f"{op}: p must be >= 1, got {p}")
    if p > n:
        raise InvalidPError(f"{op}: p = {p} exceeds ambient dimension n = {n}")
    return n, p


def orthonormality_drift(u: torch.Tensor) -> torch.Tensor:
    """||U^T U - I||_F per batch element."""
    p = u.shape[-1]
    gram = u.transpose(-1, -2) @ u
    eye = torch.eye(p, dtype=u.dtype, device=u.device)
    return torch.linalg.matrix_norm(gram - eye)


def grassmann_point(mat, p: int | None = None) -> torch.Tensor:
    """Validate (and if needed repair) an n x p matrix as a point on G(n, p).

    Accepts anything tensor-convertible.  When the orthonormality drift
    exceeds REPAIR_TOL the matrix is re-orthonormalized with qr_thin, so any
    full-column-rank input yields a valid point; rank-deficient input fails
    inside qr downstream usage with a rank error.
    """
    u = linalg.as_matrix(mat)
    n, got_p = _check_basis_shape(u, "grassmann_point")
    if p is not None and got_p != p:
        raise DimensionMismatchError(f"grassmann_point: expected p = {p}, got {got_p}")
    drift = orthonormality_drift(u)
    if bool((drift > REPAIR_TOL).any()):
        u, _ = linalg.qr_thin(u)
    return u


def _check_same_manifold(u1: torch.Tensor, u2: torch.Tensor, op: str) -> tuple[int, int]:
    n1, p1 = _check_basis_shape(u1, op)
    n2, p2 = _check_basis_shape(u2, op)
    if (n1, p1) != (n2, p2):
        raise DimensionMismatchError(
            f"{op}: points live on different manifolds, G({n1},{p1}) vs G({n2},{p2})"
        )
    return n1, p1


def projection_metric(u1: torch.Tensor, u2: torch.Tensor) -> torch.Tensor:
    """Projection metric between subspaces spanned by u1 and u2.

    Equals 2^{-1/2} ||P1 - P2||_F via d^2 = p - ||U1^T U2||_F^2, clamped at
    zero against roundoff.  For single (unbatched) pairs the arguments are
    put in a canonical byte order first so d(x, y) == d(y, x) bitwise.
    """
    _check_same_manifold(u1, u2, "projection_metric")
    if u1.ndim == 2 and u2.ndim == 2 and not (u1.requires_grad or u2.requires_grad):
        # canonical order: exact symmetry, not just symmetry up to roundoff
        b1 = u1.numpy().tobytes()
        b2 = u2.numpy().tobytes()
        if b2 < b1:
            u1, u2 = u2, u1
    p = u1.shape[-1]
    cross = u1.transpose(-1, -2) @ u2
    s = (cross * cross).sum(dim=(-2, -1))
    return torch.sqrt(torch.clamp(torch.as_tensor(float(p), dtype=u1.dtype) - s, min=0.0))


def tangent_project(u: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Project an ambient n x p matrix onto the horizontal space at u: (I - U U^T) G."""
    _check_basis_shape(u, "tangent_project")
    if g.shape[-2:] != u.shape[-2:]:
        raise DimensionMismatchError(
            f"tangent_project: ambient matrix shape {tuple(g.shape)} does not match basis {tuple(u.shape)}"
        )
    return g - u @ (u.transpose(-1, -2) @ g)


def exp_map(u: torch.Tensor, delta: torch.Tensor, reorthonormalize: bool = True) -> torch.Tensor:
    """Geodesic exponential at u in direction delta (horizontal at u).

    With thin SVD delta = Q S R^T this is U R cos(S) R^T + Q sin(S) R^T,
    evaluated here as U f(D) + delta g(D) with D = delta^T delta,
    f(x) = cos(sqrt x), g(x) = sin(sqrt x)/sqrt x.  The result is polished
    with qr_thin so the orthonormality invariant holds to machine precision.
    delta is projected onto the horizontal space first; for true tangents the
    projection is the identity.
    """
    _check_basis_shape(u, "exp_map")
    delta = tangent_project(u, delta)
    d = linalg.symmetrize(delta.transpose(-1, -2) @ delta)
    cos_part, sinc_part = linalg.spd_apply_multi(d, ("cos_sqrt", "sinc_sqrt"))
    out = u @ cos_part + delta @ sinc_part
    if reorthonormalize:
        out, _ = linalg.qr_thin(out)
    return out


def log_map(u: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Geodesic logarithm: the horizontal delta at u with exp_map(u, delta) ~ span(y).

    Computes M = (I - U U^T) Y (U^T Y)^{-1} and returns M h(M^T M) with
    h(x) = arctan(sqrt x)/sqrt x, the Gram-function form of O arctan(S) R^T.
    Raises CutLocusError when the smallest singular value of U^T Y falls
    below CUT_LOCUS_TOL (subspaces with a right angle between them have no
    unique connecting geodesic).
    """
    _check_same_manifold(u, y, "log_map")
    uty = u.transpose(-1, -2) @ y
    with torch.no_grad():
        # min singular value via the p x p Gram spectrum (cheaper than svd)
        lam_min = torch.linalg.eigvalsh(
            linalg.symmetrize(uty.transpose(-1, -2) @ uty)
        )[..., 0]
        smin = torch.sqrt(torch.clamp(lam_min, min=0.0))
        if bool((smin < CUT_LOCUS_TOL).any()):
            raise CutLocusError(
                f"log_map: min singular value of U^T Y = {float(smin.min()):.3e} "
                f"< {CUT_LOCUS_TOL:g}; pair lies at or beyond the cut locus"
            )
    # Y (U^T Y)^{-1} as a transposed solve, then remove the u-component.
    ysol = torch.linalg.solve(uty.transpose(-1, -2), y.transpose(-1, -2)).transpose(-1, -2)
    m = ysol - u @ (u.transpose(-1, -2) @ ysol)
    gram = linalg.symmetrize(m.transpose(-1, -2) @ m)
    return m @ linalg.spd_apply(gram, "atan_sqrt")


def geodesic_point(u1: torch.Tensor, u2: torch.Tensor, w: float) -> torch.Tensor:
    """Point a fraction w along the geodesic from u1 toward u2 (w = 0 -> u1, w = 1 -> span(u2))."""
    _check_same_manifold(u1, u2, "geodesic_point")
    return exp_map(u1, w * log_map(u1, u2))


def gram_schmidt_masked(
    x: torch.Tensor, tol_rel: float = 1e-8
) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-to-right Gram-Schmidt over the columns of x (..., n, k), no pivoting.

    Returns (q, valid): q has unit columns where valid is True and zero
    columns elsewhere.  A column is dropped (valid = False) when its residual
    after projecting out all previously accepted columns has norm below
    tol_rel * ||x||_F.  Two projection passes are used so accepted columns are
    orthonormal to machine precision.  Differentiable through accepted
    columns; dropped columns carry no gradient.
    """
    if x.ndim < 2:
        raise DimensionMismatchError(f"gram_schmidt: expected a matrix, got {tuple(x.shape)}")
    n, k = x.shape[-2], x.shape[-1]
    scale = torch.linalg.matrix_norm(x)
    tol = tol_rel * torch.clamp(scale, min=1e-300)
    cols: list[torch.Tensor] = []
    valids: list[torch.Tensor] = []
    for j in range(k):
        v = x[..., :, j]
        if cols:
            qprev = torch.stack(cols, dim=-1)
            v = v - (qprev @ (qprev.transpose(-1, -2) @ v.unsqueeze(-1))).squeeze(-1)
            v = v - (qprev @ (qprev.transpose(-1, -2) @ v.unsqueeze(-1))).squeeze(-1)
        norm = torch.linalg.vector_norm(v, dim=-1)
        ok = norm >= tol
        unit = v / torch.clamp(norm, min=1e-300).unsqueeze(-1)
        cols.append(torch.where(ok.unsqueeze(-1), unit, torch.zeros_like(unit)))
        valids.append(ok)
    q = torch.stack(cols, dim=-1)
    valid = torch.stack(valids, dim=-1)
    return q, valid


def gram_schmidt(x, tol_rel: float = 1e-8) -> torch.Tensor:
    """Orthonormalize the columns of one n x k matrix; returns n x r with r <= k.

    Columns that are numerically dependent on earlier ones (residual below
    tol_rel * ||x||_F) are dropped.  Raises EmptyResultError when nothing
    survives (e.g. the zero matrix).
    """
    mat = linalg.as_matrix(x)
    if mat.ndim != 2:
        raise DimensionMismatchError(f"gram_schmidt expects a single matrix, got {tuple(mat.shape)}")
    q, valid = gram_schmidt_masked(mat, tol_rel)
    idx = torch.nonzero(valid, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        raise EmptyResultError("gram_schmidt: no column survived the tolerance")
    return q[:, idx]


@dataclass
class FrechetResult:
    """Karcher flow output: the mean point plus convergence diagnostics.

    objective_trace[i] is the weighted sum of squared geodesic (arc-length)
    distances at the start of iteration i; grad_norm_trace matches it.
    """

    point: torch.Tensor
    iterations: int
    final_grad_norm: float
    converged: bool
    objective_trace: list = field(default_factory=list)


def frechet_mean(
    points: torch.Tensor,
    weights=None,
    alpha: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> FrechetResult:
    """Weighted Frechet mean of m subspaces via Karcher flow.

    points: (m, n, p) stacked bases (or a list of bases).  Initialization is
    the point with the largest weight, ties broken toward the lowest index.
    Each iteration maps all points to the tangent space at the current
    estimate, steps along alpha times the weighted tangent mean, and stops
    when the tangent mean norm falls below tol.  On max_iter exhaustion the
    best iterate seen (smallest tangent-mean norm) is returned with
    converged = False.
    """
    if isinstance(points, (list, tuple)):
        points = torch.stack([linalg.as_matrix(q) for q in points], dim=0)
    else:
        points = linalg.as_matrix(points)
    if points.ndim != 3 or points.shape[0] == 0:
        raise EmptyBatchError("frechet_mean: need a nonempty (m, n, p) stack of points")
    m = points.shape[0]
    if weights is None:
        w = torch.full((m,), 1.0 / m, dtype=linalg.DTYPE)
    else:
        w = linalg.as_matrix(weights).reshape(-1)
        if w.numel() != m:
            raise DimensionMismatchError(f"frechet_mean: {m} points but {w.numel()} weights")
        if bool((w < 0).any()) or float(w.sum()) <= 0.0:
            raise ValueError("frechet_mean: weights must be nonnegative with positive sum")
        w = w / w.sum()

    gamma = points[int(torch.argmax(w))]
    best = gamma
    best_norm = float("inf")
    objective_trace: list[float] = []
    iterations = 0
    converged = False
    grad_norm = float("inf")
    for _ in range(max_iter):
        logs = log_map(gamma, points)  # (m, n, p)
        sq = (logs * logs).sum(dim=(-2, -1))
        objective_trace.append(float((w * sq).sum()))
        t = (w.view(-1, 1, 1) * logs).sum(dim=0)
        grad_norm = float(torch.linalg.matrix_norm(t))
        if grad_norm < best_norm:
            best_norm = grad_norm
            best = gamma
        if grad_norm < tol:
            converged = True
            break
        gamma = exp_map(gamma, alpha * t)
        iterations += 1
    if not converged:
        gamma = best
        grad_norm = best_norm
    return FrechetResult(
        point=gamma,
        iterations=iterations,
        final_grad_norm=grad_norm,
        converged=converged,
        objective_trace=objective_trace,
    )


def karcher_mean_batched(
    points: torch.Tensor,
    weights: torch.Tensor,
    alpha: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> tuple[torch.Tensor, int]:
    """Karcher flow over a batch of point clouds, autodiff-friendly.

    points: (..., m, n, p); weights: (m,) normalized by the caller.  The loop
    runs until the largest tangent-mean norm over the whole batch drops below
    tol (or max_iter); every batch element performs the same number of
    iterations, which keeps the unrolled backward sequence identical across
    the batch.  Initialization is the highest-weight point.
    """
    start = points[..., int(torch.argmax(weights)), :, :]
    gamma = start
    wcol = weights.view(-1, 1, 1)
    iterations = 0
    for _ in range(max_iter):
        logs = log_map(gamma.unsqueeze(-3), points)
        t = (wcol * logs).sum(dim=-3)
        with torch.no_grad():
            worst = float(torch.linalg.matrix_norm(t).max())
        if worst < tol:
            break
        gamma = exp_map(gamma, alpha * t)
        iterations += 1
    return gamma, iterations


def random_point(n: int, p: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform-ish random point: thin QR of a standard Gaussian n x p matrix."""
    a = torch.randn(n, p, generator=generator, dtype=linalg.DTYPE)
    q, _ = linalg.qr_thin(a)
    return q


def random_tangent(u: torch.Tensor, norm: float, generator: torch.Generator) -> torch.Tensor:
    """Random horizontal direction at u scaled to the requested Frobenius norm."""
    z = torch.randn(*u.shape, generator=generator, dtype=linalg.DTYPE)
    d = tangent_project(u, z)
    scale = torch.linalg.matrix_norm(d)
    return d * (norm / torch.clamp(scale, min=1e-300))
