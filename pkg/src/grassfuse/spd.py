"""Symmetric positive definite geometry and batch normalization.

The metric throughout is the affine-invariant one; congruence by any
invertible matrix is an isometry, which is what the normalization layer
exploits: pushing a batch's barycenter to the identity and then to a
learnable mean is a pure congruence pipeline

    X_hat = G^{1/2} (B^{-1/2} X B^{-1/2}) G^{1/2}.

Matrix powers, logs and square roots all go through linalg.spd_apply so
eigenvalues below the SPD floor are clamped (flagged) instead of aborting a
training step, and so the reverse-mode derivatives stay finite on repeated
spectra.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import linalg
from .exceptions import DimensionMismatchError, EmptyBatchError

# Karcher solver defaults for the batch barycenter.
BARYCENTER_TOL = 1e-8
BARYCENTER_MAX_ITER = 50

# Fraction of the geodesic toward the fresh batch statistic absorbed into the
# running mean each training step.
DEFAULT_MOMENTUM = 0.1

# Geodesic step fraction for the learnable mean update.
DEFAULT_MEAN_LR = 0.01


def check_spd_shape(x: torch.Tensor, op: str) -> int:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionMismatchError(f"{op}: expected square matrices, got {tuple(x.shape)}")
    return x.shape[-1]


def affine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Affine-invariant distance ||log(A^{-1/2} B A^{-1/2})||_F."""
    check_spd_shape(a, "affine_distance")
    check_spd_shape(b, "affine_distance")
    w = linalg.spd_apply(a, "inv_sqrt")
    inner = linalg.symmetrize(w @ b @ w)
    return torch.linalg.matrix_norm(linalg.spd_apply(inner, "log"))


@dataclass
class BarycenterResult:
    point: torch.Tensor
    iterations: int
    converged: bool
    final_grad_norm: float


def spd_barycenter(
    mats: torch.Tensor,
    weights=None,
    tol: float = BARYCENTER_TOL,
    max_iter: int = BARYCENTER_MAX_ITER,
) -> BarycenterResult:
    """Weighted affine-invariant barycenter of (N, n, n) SPD matrices.

    Fixed-point iteration B <- B^{1/2} exp(sum_i w_i log(B^{-1/2} X_i B^{-1/2})) B^{1/2}
    from the weighted arithmetic mean, stopping when the tangent mean's
    Frobenius norm falls below tol.  Exhausting max_iter returns the last
    iterate with converged = False; callers treat that as a soft condition.
    """
    if isinstance(mats, (list, tuple)):
        mats = torch.stack([linalg.as_matrix(m) for m in mats], dim=0)
    else:
        mats = linalg.as_matrix(mats)
    if mats.ndim != 3 or mats.shape[0] == 0:
        raise EmptyBatchError("spd_barycenter: need a nonempty (N, n, n) stack")
    check_spd_shape(mats, "spd_barycenter")
    n_mats = mats.shape[0]
    if weights is None:
        w = torch.full((n_mats,), 1.0 / n_mats, dtype=linalg.DTYPE)
    else:
        w = linalg.as_matrix(weights).reshape(-1)
        if w.numel() != n_mats:
            raise DimensionMismatchError("spd_barycenter: weights do not match matrix count")
        if bool((w < 0).any()) or float(w.sum()) <= 0:
            raise ValueError("spd_barycenter: weights must be nonnegative with positive sum")
        w = w / w.sum()

    wcol = w.view(-1, 1, 1)
    b = linalg.symmetrize((wcol * mats).sum(dim=0))
    iterations = 0
    converged = False
    grad_norm = float("inf")
    for _ in range(max_iter):
        root, inv_root = linalg.spd_sqrt_and_inv_sqrt(b)
        inner = linalg.symmetrize(inv_root @ mats @ inv_root)
        tangent = (wcol * linalg.spd_apply(inner, "log")).sum(dim=0)
        grad_norm = float(torch.linalg.matrix_norm(tangent))
        if grad_norm < tol:
            converged = True
            break
        b = linalg.symmetrize(root @ linalg.spd_apply(tangent, "exp") @ root)
        iterations += 1
    return BarycenterResult(point=b, iterations=iterations, converged=converged, final_grad_norm=grad_norm)


def geodesic_power_step(base: torch.Tensor, target: torch.Tensor, w: float) -> torch.Tensor:
    """Move a fraction w along the affine-invariant geodesic from base toward target.

    base^{1/2} (base^{-1/2} target base^{-1/2})^w base^{1/2}; w = 0 returns
    base, w = 1 returns target.
    """
    root, inv_root = linalg.spd_sqrt_and_inv_sqrt(base)
    inner = linalg.symmetrize(inv_root @ target @ inv_root)
    powered = linalg.spd_apply(inner, "pow", exponent=float(w))
    return linalg.symmetrize(root @ powered @ root)


@dataclass
class SpdBnState:
    """State of one SPD batch-normalization layer.

    running_mean is an inference-time buffer (never differentiated);
    learnable_mean is a trainable SPD parameter, stored as a free matrix and
    symmetrized on use so its ambient gradient matches entrywise finite
    differences.
    """

    running_mean: torch.Tensor
    learnable_mean: torch.Tensor
    momentum: float = DEFAULT_MOMENTUM
    mean_lr: float = DEFAULT_MEAN_LR
    trained_steps: int = 0
    barycenter_tol: float = BARYCENTER_TOL
    barycenter_max_iter: int = BARYCENTER_MAX_ITER
    last_clamped: bool = field(default=False, repr=False)

    @staticmethod
    def fresh(n: int, momentum: float = DEFAULT_MOMENTUM, mean_lr: float = DEFAULT_MEAN_LR,
              barycenter_tol: float = BARYCENTER_TOL,
              barycenter_max_iter: int = BARYCENTER_MAX_ITER) -> "SpdBnState":
        eye = torch.eye(n, dtype=linalg.DTYPE)
        learnable = eye.clone().requires_grad_(True)
        return SpdBnState(
            running_mean=eye.clone(),
            learnable_mean=learnable,
            momentum=momentum,
            mean_lr=mean_lr,
            barycenter_tol=barycenter_tol,
            barycenter_max_iter=barycenter_max_iter,
        )


def running_mean_update(state: SpdBnState, batch_mean: torch.Tensor) -> None:
    """Geodesic interpolation of the running mean toward a fresh batch statistic."""
    with torch.no_grad():
        state.running_mean = geodesic_power_step(
            state.running_mean, batch_mean.detach(), state.momentum
        )


def spdbn_forward(
    x: torch.Tensor,
    state: SpdBnState,
    training: bool,
    update_state: bool = True,
) -> torch.Tensor:
    """Normalize a batch of SPD matrices to the learnable mean.

    Training mode centers at the batch barycenter (differentiable through the
    Karcher iterations, which autograd unrolls at the realized count) and,
    when update_state is set, folds the detached statistic into the running
    mean.  Inference mode centers at the running mean and never mutates
    state.
    """
    if x.ndim != 3:
        raise DimensionMismatchError(f"spdbn_forward: expected (B, n, n), got {tuple(x.shape)}")
    if x.shape[0] == 0:
        raise EmptyBatchError("spdbn_forward: empty batch")
    n = check_spd_shape(x, "spdbn_forward")
    if state.learnable_mean.shape[-1] != n:
        raise DimensionMismatchError(
            f"spdbn_forward: state is {tuple(state.learnable_mean.shape)}, batch is n = {n}"
        )
    if training:
        center = spd_barycenter(
            x, tol=state.barycenter_tol, max_iter=state.barycenter_max_iter
        ).point
    else:
        center = state.running_mean
    inv_root = linalg.spd_apply(center, "inv_sqrt")
    centered = linalg.symmetrize(inv_root @ x @ inv_root)
    g_root, clamped = linalg.spd_apply(
        linalg.symmetrize(state.learnable_mean), "sqrt", return_clamped=True
    )
    out = linalg.symmetrize(g_root @ centered @ g_root)
    state.last_clamped = clamped
    if training and update_state:
        running_mean_update(state, center)
        state.trained_steps += 1
    return out
