"""Fusion-network layers.

One block maps an n x n SPD feature to an m x m SPD feature:

  1. SPD batch normalization (spd.spdbn_forward).
  2. Atom bank: Gram-Schmidt over the normalized feature's columns, one
     G(n, 1) atom per surviving column.
  3. Adaptive subspace construction: a learnable importance matrix (m' x k)
     is row-softmaxed; the top-p atoms per row, in descending-weight order
     with ties broken toward the lower index, form m' weighted n x p bases.
  4. Channel subspace mappings: c Stiefel matrices (n x m) project every
     basis to m x p, re-orthonormalized (QR by default, SVD/polar optional).
  5. Subspace interaction: the m' points per channel are fused to one G(m, p)
     point by a weighted Karcher mean (closed geodesic step for m' = 2).
  6. Aggregation: mean of the c fused projectors plus a small ridge, an SPD
     feature for the next block or the classifier head.

Gradient notes.  The forward is exactly invariant to the magnitudes of the
selected softmax weights (re-orthonormalization cancels any positive column
scaling), so the exact gradient to the importance matrix is zero.  Training
instead uses a straight-through surrogate: a zero-valued branch
(W^T A).detach() diag(w) inv(R).detach() is added to the re-orthonormalized
output, which routes gradients to the importance matrix through the softmax
and the selection mask while the selection itself stays frozen within a
step.  The gradient audit reports this block instead of asserting it against
finite differences; everything else is differentiated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from . import grassmann, linalg, spd
from .config import BlockSpec, KarcherConfig, RunConfig
from .exceptions import (
    DimensionMismatchError,
    InsufficientAtomsError,
    InvalidPError,
    RankDeficientError,
)

AGGREGATE_RIDGE = 1e-6

# Importance logits start near-uniform so the top-p selection is genuinely
# exploratory early in training: boundary gaps between ranked softmax weights
# are small enough for the selection-mask gradient to reorder them, and they
# widen as consistent gradient accumulates.
IMPORTANCE_INIT_SCALE = 0.1


@dataclass
class AdamscOutput:
    """Adaptive construction results for one batch.

    weighted: (B, m', n, p) bases whose columns are the selected atoms scaled
        by their softmax weights, descending-weight column order.
    selected_atoms / selected_weights: the same bases unscaled, and the scale
        factors, kept separate for the straight-through branch.
    indices: (B, m', p) atom indices; mask: (B, m', k) binary selection;
    weights: (m', k) full softmax rows (shared across the batch).
    """

    weighted: torch.Tensor
    selected_atoms: torch.Tensor
    selected_weights: torch.Tensor
    indices: torch.Tensor
    mask: torch.Tensor
    weights: torch.Tensor


def adamsc_forward(
    atoms: torch.Tensor,
    valid: torch.Tensor,
    importance: torch.Tensor,
    p: int,
) -> AdamscOutput:
    """Select and weight top-p atoms per constructed subspace.

    atoms: (B, n, k) with zero columns where valid is False; importance:
    (m', k).  Raises InsufficientAtomsError when any sample has fewer than p
    valid atoms, InvalidPError when p exceeds k.
    """
    if atoms.ndim != 3:
        raise DimensionMismatchError(f"adamsc_forward: atoms must be (B, n, k), got {tuple(atoms.shape)}")
    bsz, n, k = atoms.shape
    if importance.ndim != 2 or importance.shape[1] != k:
        raise DimensionMismatchError(
            f"adamsc_forward: importance {tuple(importance.shape)} does not match k = {k}"
        )
    m_prime = importance.shape[0]
    if p < 1 or p > k:
        raise InvalidPError(f"adamsc_forward: p = {p} must lie in [1, k = {k}]")
    counts = valid.sum(dim=-1)
    if int(counts.min()) < p:
        raise InsufficientAtomsError(
            f"adamsc_forward: a sample has only {int(counts.min())} atoms, need p = {p}"
        )

    w = torch.softmax(importance, dim=-1)
    order = torch.argsort(w, dim=-1, descending=True, stable=True)  # (m', k)

    if bool(valid.all()):
        idx = order[:, :p].unsqueeze(0).expand(bsz, m_prime, p)
    else:
        # Per sample: the first p valid atoms in ranking order.
        vio = valid[:, order.reshape(-1)].reshape(bsz, m_prime, k)
        take = vio & (vio.cumsum(dim=-1) <= p)
        arange = torch.arange(k, device=atoms.device).expand(bsz, m_prime, k)
        pos = torch.where(take, arange, torch.full_like(arange, k))
        pos = pos.sort(dim=-1).values[..., :p]
        idx = torch.gather(order.unsqueeze(0).expand(bsz, m_prime, k), 2, pos)

    w_sel = torch.gather(w.unsqueeze(0).expand(bsz, m_prime, k), 2, idx)
    idx_cols = idx.unsqueeze(2).expand(bsz, m_prime, n, p)
    a_sel = torch.gather(atoms.unsqueeze(1).expand(bsz, m_prime, n, k), 3, idx_cols)
    weighted = a_sel * w_sel.unsqueeze(2)
    mask = torch.zeros(bsz, m_prime, k, dtype=atoms.dtype, device=atoms.device)
    mask.scatter_(2, idx, 1.0)
    return AdamscOutput(
        weighted=weighted,
        selected_atoms=a_sel,
        selected_weights=w_sel,
        indices=idx,
        mask=mask,
        weights=w,
    )


@dataclass
class GmsrOutput:
    points: torch.Tensor  # (B, c, m', m, p)
    r_inv: Optional[torch.Tensor] = None  # detached, QR mode only
    normalizer: Optional[torch.Tensor] = None  # detached, polar mode only


def gmsr_forward(ad: AdamscOutput, maps: torch.Tensor, reorth: str = "qr") -> GmsrOutput:
    """Map weighted bases through every Stiefel channel and re-orthonormalize.

    maps: (c, n, m) with orthonormal columns.  Raises RankDeficientError when
    any projected basis loses column rank (a degenerate channel map); the
    training loop aborts the step on that.
    """
    if maps.ndim != 3:
        raise DimensionMismatchError(f"gmsr_forward: maps must be (c, n, m), got {tuple(maps.shape)}")
    n = ad.weighted.shape[-2]
    if maps.shape[1] != n:
        raise DimensionMismatchError(
            f"gmsr_forward: maps are {tuple(maps.shape)} but bases have n = {n}"
        )
    raw = torch.einsum("cnm,bsnp->bcsmp", maps, ad.weighted)
    base = torch.einsum("cnm,bsnp->bcsmp", maps.detach(), ad.selected_atoms.detach())
    w_bc = ad.selected_weights.unsqueeze(1).unsqueeze(-2)  # (B, 1, m', 1, p)
    if reorth == "qr":
        q, r = linalg.qr_thin(raw)
        with torch.no_grad():
            if bool(linalg.qr_is_rank_deficient(r, raw).any()):
                raise RankDeficientError(
                    "gmsr_forward: a projected basis is column-rank-deficient"
                )
            r_inv = torch.linalg.inv(r.detach())
        q_st = (base * w_bc) @ r_inv
        return GmsrOutput(points=q + (q_st - q_st.detach()), r_inv=r_inv)
    if reorth == "svd":
        gram = linalg.symmetrize(raw.transpose(-1, -2) @ raw)
        with torch.no_grad():
            lam_min = torch.linalg.eigvalsh(gram)[..., 0]
            scale = torch.linalg.matrix_norm(raw)
            if bool((lam_min < (linalg.RANK_TOL * torch.clamp(scale, min=1e-300)) ** 2).any()):
                raise RankDeficientError(
                    "gmsr_forward: a projected basis is column-rank-deficient"
                )
        normalizer = linalg.spd_apply(gram, "inv_sqrt")
        q = raw @ normalizer
        q_st = (base * w_bc) @ normalizer.detach()
        return GmsrOutput(points=q + (q_st - q_st.detach()), normalizer=normalizer.detach())
    raise ValueError(f"gmsr_forward: unknown reorth mode {reorth!r}")


def gsi_forward(
    points: torch.Tensor,
    fusion_weights: Optional[torch.Tensor],
    karcher: KarcherConfig,
) -> tuple[torch.Tensor, int]:
    """Fuse the m' points per channel into one subspace.

    points: (B, c, m', m, p).  m' = 1 is the identity; m' = 2 is the closed
    geodesic step toward the second point; larger m' runs the Karcher flow
    (every batch element performs the same iteration count).
    """
    m_prime = points.shape[-3]
    if fusion_weights is None:
        w = torch.full((m_prime,), 1.0 / m_prime, dtype=points.dtype, device=points.device)
    else:
        w = fusion_weights.to(points.dtype)
        if w.numel() != m_prime:
            raise DimensionMismatchError(
                f"gsi_forward: {m_prime} points but {w.numel()} fusion weights"
            )
        w = w / w.sum()
    if m_prime == 1:
        return points[..., 0, :, :], 0
    if m_prime == 2:
        base = points[..., 0, :, :]
        other = points[..., 1, :, :]
        delta = grassmann.log_map(base, other)
        return grassmann.exp_map(base, float(w[1]) * delta), 1
    return grassmann.karcher_mean_batched(
        points, w, alpha=karcher.alpha, tol=karcher.tol, max_iter=karcher.max_iter
    )


def aggregate_channels(fused: torch.Tensor, ridge: float = AGGREGATE_RIDGE) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of the fused projectors plus ridge * I: (B, c, m, p) -> (B, m, m) SPD.

    Also returns the per-channel projectors (B, c, m, m) for the channel
    feature vectors.
    """
    proj = fused @ fused.transpose(-1, -2)
    agg = proj.mean(dim=1)
    m = agg.shape[-1]
    eye = torch.eye(m, dtype=fused.dtype, device=fused.device)
    return linalg.symmetrize(agg + ridge * eye), proj


def head_forward(feature: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Linear classifier on the row-major flattened SPD feature."""
    bsz = feature.shape[0]
    vec = feature.reshape(bsz, -1)
    if vec.shape[1] != weight.shape[1]:
        raise DimensionMismatchError(
            f"head_forward: feature dimension {vec.shape[1]} does not match head {tuple(weight.shape)}"
        )
    return vec @ weight.transpose(0, 1) + bias


@dataclass
class BlockParams:
    spec: BlockSpec
    importance: torch.Tensor  # (m', k), trainable
    maps: torch.Tensor  # (c, n, m) Stiefel, trainable
    bn: spd.SpdBnState


@dataclass
class BlockOutput:
    aggregate: torch.Tensor
    fused: torch.Tensor
    channel_features: torch.Tensor
    indices: torch.Tensor
    mask: torch.Tensor
    atoms: torch.Tensor
    atom_valid: torch.Tensor
    softmax_weights: torch.Tensor
    karcher_iterations: int
    intermediates: dict = field(default_factory=dict)


@dataclass
class SubspaceFusionModel:
    blocks: list[BlockParams]
    head_weight: torch.Tensor
    head_bias: torch.Tensor
    classes: int
    reorth: str = "qr"
    karcher: KarcherConfig = field(default_factory=KarcherConfig)
    fusion_weights: Optional[torch.Tensor] = None
    step_count: int = 0

    def parameters(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.importance"] = blk.importance
            out[f"blocks.{i}.maps"] = blk.maps
            out[f"blocks.{i}.learnable_mean"] = blk.bn.learnable_mean
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            if p.grad is not None:
                p.grad = None

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters().values())


@dataclass
class ModelOutput:
    logits: torch.Tensor
    blocks: list[BlockOutput]


def init_model(cfg: RunConfig, generator: torch.Generator) -> SubspaceFusionModel:
    """Seeded initialization: Gaussian importance, QR-orthonormal channel maps,
    identity normalization means, small-Gaussian head."""
    blocks = []
    for spec in cfg.architecture.blocks:
        k = spec.resolved_k()
        importance = IMPORTANCE_INIT_SCALE * torch.randn(
            spec.m_prime, k, generator=generator, dtype=linalg.DTYPE
        )
        maps_raw = torch.randn(spec.c, spec.n, spec.m, generator=generator, dtype=linalg.DTYPE)
        maps, _ = linalg.qr_thin(maps_raw)
        # LAPACK hands Q back with transposed strides; keep parameters contiguous
        # so views of .data always alias the real storage.
        maps = maps.contiguous()
        blocks.append(
            BlockParams(
                spec=spec,
                importance=importance.requires_grad_(True),
                maps=maps.requires_grad_(True),
                bn=spd.SpdBnState.fresh(
                    spec.n,
                    momentum=cfg.spdbn.momentum,
                    mean_lr=cfg.spdbn.mean_lr,
                    barycenter_tol=cfg.spdbn.barycenter_tol,
                    barycenter_max_iter=cfg.spdbn.barycenter_max_iter,
                ),
            )
        )
    m_last = cfg.architecture.blocks[-1].m
    head_weight = torch.randn(
        cfg.architecture.classes, m_last * m_last, generator=generator, dtype=linalg.DTYPE
    ) / float(m_last)
    head_bias = torch.zeros(cfg.architecture.classes, dtype=linalg.DTYPE)
    fusion_weights = None
    if cfg.fusion_weights is not None:
        fusion_weights = torch.tensor(cfg.fusion_weights, dtype=linalg.DTYPE)
    return SubspaceFusionModel(
        blocks=blocks,
        head_weight=head_weight.requires_grad_(True),
        head_bias=head_bias.requires_grad_(True),
        classes=cfg.architecture.classes,
        reorth=cfg.reorth,
        karcher=cfg.karcher,
        fusion_weights=fusion_weights,
    )


def block_forward(
    x: torch.Tensor,
    blk: BlockParams,
    reorth: str,
    karcher: KarcherConfig,
    fusion_weights: Optional[torch.Tensor],
    training: bool,
    update_state: bool = True,
    keep_intermediates: bool = False,
) -> BlockOutput:
    spec = blk.spec
    normalized = spd.spdbn_forward(x, blk.bn, training=training, update_state=update_state)
    atoms, valid = grassmann.gram_schmidt_masked(normalized)
    k = spec.resolved_k()
    atoms = atoms[..., :k]
    valid = valid[..., :k]
    if keep_intermediates:
        atoms.retain_grad()
    ad = adamsc_forward(atoms, valid, blk.importance, spec.p)
    gm = gmsr_forward(ad, blk.maps, reorth)
    if keep_intermediates:
        gm.points.retain_grad()
    fused, iters = gsi_forward(gm.points, fusion_weights, karcher)
    aggregate, proj = aggregate_channels(fused)
    bsz, c = proj.shape[0], proj.shape[1]
    channel_features = proj.reshape(bsz, c, -1)
    intermediates = {}
    if keep_intermediates:
        intermediates = {
            "atoms": atoms,
            "points": gm.points,
            "r_inv": gm.r_inv,
            "normalizer": gm.normalizer,
            "adamsc": ad,
        }
    return BlockOutput(
        aggregate=aggregate,
        fused=fused,
        channel_features=channel_features,
        indices=ad.indices,
        mask=ad.mask,
        atoms=atoms,
        atom_valid=valid,
        softmax_weights=ad.weights,
        karcher_iterations=iters,
        intermediates=intermediates,
    )


def model_forward(
    model: SubspaceFusionModel,
    x: torch.Tensor,
    training: bool,
    update_state: bool = True,
    keep_intermediates: bool = False,
) -> ModelOutput:
    feats = x
    blocks_out: list[BlockOutput] = []
    for blk in model.blocks:
        out = block_forward(
            feats,
            blk,
            reorth=model.reorth,
            karcher=model.karcher,
            fusion_weights=model.fusion_weights,
            training=training,
            update_state=update_state,
            keep_intermediates=keep_intermediates,
        )
        blocks_out.append(out)
        feats = out.aggregate
    logits = head_forward(feats, model.head_weight, model.head_bias)
    return ModelOutput(logits=logits, blocks=blocks_out)
