"""End-to-end run helpers shared by the CLI, experiment scripts, and tests.

Seeding: everything a run draws derives from cfg.seed, but the data stream,
the model-init stream, the shuffle stream, and the resampling stream of the
random ablation variant are separate generators at fixed offsets, so that
(for example) the same numbers never serve as both class centers and initial
importance entries.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from . import data, linalg, training
from .config import BlockSpec, RunConfig, validate_config
from .exceptions import ConfigError, ShapeMismatchError
from .layers import SubspaceFusionModel, init_model
from .training import TrainResult

MODEL_SEED_OFFSET = 1_000_003
SHUFFLE_SEED_OFFSET = 2_000_003
RESAMPLE_SEED_OFFSET = 3_000_003

VARIANTS = ("adaptive", "fixed", "random")


def prepare_datasets(cfg: RunConfig) -> tuple[data.Dataset, Optional[data.Dataset]]:
    """Materialize (train, test) from the data section; test may be None."""
    if cfg.data.synthetic is not None:
        train, test, _ = data.make_synthetic(cfg.data.synthetic, cfg.seed)
    else:
        train = data.load_manifest(cfg.data.manifest, classes=cfg.architecture.classes)
        test = (
            data.load_manifest(cfg.data.test_manifest, classes=cfg.architecture.classes)
            if cfg.data.test_manifest is not None
            else None
        )
    n = cfg.architecture.blocks[0].n
    for name, ds in (("train", train), ("test", test)):
        if ds is not None and ds.features.shape[-1] != n:
            raise ShapeMismatchError(
                f"{name} data width {ds.features.shape[-1]} does not match "
                f"architecture.blocks[0].n = {n}"
            )
    return train, test


def new_model(cfg: RunConfig) -> SubspaceFusionModel:
    return init_model(cfg, linalg.machine_seeded_generator(cfg.seed + MODEL_SEED_OFFSET))


def _resample_importance(model: SubspaceFusionModel, generator: torch.Generator) -> None:
    with torch.no_grad():
        for blk in model.blocks:
            blk.importance.copy_(
                torch.randn(blk.importance.shape, generator=generator, dtype=linalg.DTYPE)
            )


@dataclass
class RunArtifacts:
    cfg: RunConfig
    variant: str
    model: SubspaceFusionModel
    train: data.Dataset
    test: Optional[data.Dataset]
    result: TrainResult


def train_once(
    cfg: RunConfig,
    variant: str = "adaptive",
    on_epoch: Optional[Callable[[dict], None]] = None,
    datasets: Optional[tuple[data.Dataset, Optional[data.Dataset]]] = None,
) -> RunArtifacts:
    """One full deterministic training run.

    variant "adaptive" trains the importance matrices normally; "fixed"
    freezes them at initialization; "random" freezes their training and
    redraws them i.i.d. standard normal at every epoch boundary.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    train_ds, test_ds = datasets if datasets is not None else prepare_datasets(cfg)
    model = new_model(cfg)
    run_cfg = cfg
    if variant in ("fixed", "random"):
        run_cfg = dataclasses.replace(
            cfg, optimizer=dataclasses.replace(cfg.optimizer, importance_lr_scale=0.0)
        )
    hooks: list[Callable[[dict], None]] = []
    if on_epoch is not None:
        hooks.append(on_epoch)
    if variant == "random":
        resample_gen = linalg.machine_seeded_generator(cfg.seed + RESAMPLE_SEED_OFFSET)
        _resample_importance(model, resample_gen)
        hooks.append(lambda _record: _resample_importance(model, resample_gen))

    def chained(record: dict) -> None:
        for hook in hooks:
            hook(record)

    result = training.fit(
        model,
        train_ds.features,
        train_ds.labels,
        run_cfg,
        test_features=None if test_ds is None else test_ds.features,
        test_labels=None if test_ds is None else test_ds.labels,
        shuffle_generator=linalg.machine_seeded_generator(cfg.seed + SHUFFLE_SEED_OFFSET),
        on_epoch=chained if hooks else None,
    )
    return RunArtifacts(
        cfg=cfg, variant=variant, model=model, train=train_ds, test=test_ds, result=result
    )


def with_m_prime(cfg: RunConfig, m_prime: int) -> RunConfig:
    """Rebuild the architecture with every block's subspace count replaced."""
    blocks = tuple(
        BlockSpec(n=b.n, p=b.p, m_prime=m_prime, c=b.c, m=b.m, k_mode=b.k_mode)
        for b in cfg.architecture.blocks
    )
    fusion = cfg.fusion_weights
    if fusion is not None and len(fusion) != m_prime:
        fusion = None
    out = dataclasses.replace(
        cfg,
        architecture=dataclasses.replace(cfg.architecture, blocks=blocks),
        fusion_weights=fusion,
    )
    validate_config(out)
    return out


def _mean_std(values: list[float]) -> tuple[float, float]:
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def ablation_study(
    cfg: RunConfig, on_run: Optional[Callable[[dict], None]] = None
) -> dict:
    """Adaptive / fixed / random variants across seeds (and optional sweeps).

    Returns a machine-readable table: one row per (variant, m_prime, mi_sign,
    seed) with the final test accuracy, a per-combination mean +/- std
    summary, and an ordering record per (m_prime, mi_sign) cell comparing the
    three variant means.
    """
    ab = cfg.ablation
    if ab is None:
        raise ConfigError("ablation_study: config has no 'ablation' section")
    if cfg.data.synthetic is None and cfg.data.test_manifest is None:
        raise ConfigError("ablation_study: needs a test split (synthetic data or test_manifest)")
    m_primes = ab.m_prime_values or tuple(
        sorted({b.m_prime for b in cfg.architecture.blocks})
    )
    mi_signs = ab.mi_signs or (cfg.loss.mi_sign,)
    rows: list[dict] = []
    for m_prime in m_primes:
        for mi_sign in mi_signs:
            for seed in ab.seeds:
                run_cfg = with_m_prime(cfg, m_prime)
                run_cfg = dataclasses.replace(
                    run_cfg,
                    seed=seed,
                    loss=dataclasses.replace(run_cfg.loss, mi_sign=mi_sign),
                )
                if ab.max_epochs is not None:
                    run_cfg = dataclasses.replace(
                        run_cfg,
                        optimizer=dataclasses.replace(
                            run_cfg.optimizer, max_epochs=ab.max_epochs
                        ),
                    )
                datasets = prepare_datasets(run_cfg)
                for variant in VARIANTS:
                    art = train_once(run_cfg, variant=variant, datasets=datasets)
                    row = {
                        "variant": variant,
                        "m_prime": m_prime,
                        "mi_sign": mi_sign,
                        "seed": seed,
                        "test_accuracy": art.result.final_test_accuracy,
                        "train_accuracy": art.result.final_train_accuracy,
                        "epochs_run": art.result.epochs_run,
                        "converged": art.result.monitor.converged,
                    }
                    rows.append(row)
                    if on_run is not None:
                        on_run(row)
    summary: list[dict] = []
    ordering: list[dict] = []
    for m_prime in m_primes:
        for mi_sign in mi_signs:
            means: dict[str, float] = {}
            for variant in VARIANTS:
                accs = [
                    r["test_accuracy"]
                    for r in rows
                    if r["variant"] == variant
                    and r["m_prime"] == m_prime
                    and r["mi_sign"] == mi_sign
                ]
                mean, std = _mean_std(accs)
                means[variant] = mean
                summary.append(
                    {
                        "variant": variant,
                        "m_prime": m_prime,
                        "mi_sign": mi_sign,
                        "mean_accuracy": mean,
                        "std_accuracy": std,
                        "n_seeds": len(accs),
                    }
                )
            ordering.append(
                {
                    "m_prime": m_prime,
                    "mi_sign": mi_sign,
                    "adaptive_mean": means["adaptive"],
                    "fixed_mean": means["fixed"],
                    "random_mean": means["random"],
                    "adaptive_gt_fixed": means["adaptive"] > means["fixed"],
                    "fixed_gt_random": means["fixed"] > means["random"],
                    "adaptive_minus_random": means["adaptive"] - means["random"],
                }
            )
    return {
        "seeds": list(ab.seeds),
        "m_prime_values": list(m_primes),
        "mi_signs": list(mi_signs),
        "rows": rows,
        "summary": summary,
        "ordering": ordering,
    }
