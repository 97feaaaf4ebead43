"""Run configuration: dataclasses plus strict JSON loading.

Config files are JSON objects with lowercase snake_case keys.  Unknown keys
anywhere in the tree are errors (they are nearly always typos and silently
ignoring them burns hours), as are missing required sections.  `lambda` is
accepted as the JSON spelling of the regularizer weight because that is the
natural name for it; the dataclass field is mi_weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from .exceptions import ChainMismatchError, ConfigError, InvalidPError


@dataclass(frozen=True)
class BlockSpec:
    """Dimensions of one fusion block.

    n: ambient (input feature) dimension; the input is an n x n SPD feature.
    k_mode: "full" keeps one atom per input column (k = n); an integer keeps
        the first k surviving atoms.
    p: subspace dimension of every constructed and fused subspace.
    m_prime: number of constructed subspaces per input.
    c: number of Stiefel channel maps.
    m: channel target dimension; fused points live on G(m, p) and the block
        output is an m x m SPD feature.
    """

    n: int
    p: int
    m_prime: int
    c: int
    m: int
    k_mode: str | int = "full"

    def resolved_k(self) -> int:
        if self.k_mode == "full":
            return self.n
        return int(self.k_mode)


@dataclass(frozen=True)
class ArchitectureConfig:
    blocks: tuple[BlockSpec, ...]
    classes: int


@dataclass(frozen=True)
class LossConfig:
    mi_weight: float = 0.1
    mi_epsilon: float = 1e-8
    mi_sign: str = "as_printed"  # or "complementarity"


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "constant"  # or "inverse_decay"
    t0: float = 50.0


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = 0.01
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    max_epochs: int = 200
    batch_size: int = 50
    early_stop: bool = True
    convergence_threshold: float = 1e-3
    convergence_window: int = 10
    importance_lr_scale: float = 1.0


@dataclass(frozen=True)
class KarcherConfig:
    alpha: float = 1.0
    tol: float = 1e-8
    max_iter: int = 100


@dataclass(frozen=True)
class SpdBnConfig:
    momentum: float = 0.1
    mean_lr: float = 0.01
    barycenter_tol: float = 1e-8
    barycenter_max_iter: int = 50


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    n: int
    d: int
    sigma: float
    frames: int
    train_per_class: int
    test_per_class: int
    min_separation: float = 0.3
    max_redraws: int = 100


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSpec | None = None
    manifest: str | None = None
    test_manifest: str | None = None


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    m_prime_values: tuple[int, ...] | None = None
    mi_signs: tuple[str, ...] | None = None
    max_epochs: int | None = None


@dataclass(frozen=True)
class RunConfig:
    architecture: ArchitectureConfig
    data: DataConfig
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    karcher: KarcherConfig = field(default_factory=KarcherConfig)
    spdbn: SpdBnConfig = field(default_factory=SpdBnConfig)
    reorth: str = "qr"  # or "svd"
    fusion_weights: tuple[float, ...] | None = None
    seed: int = 0
    ablation: AblationConfig | None = None


# --- strict dict -> dataclass construction ----------------------------------


def _require(d: dict, key: str, where: str) -> Any:
    if key not in d:
        raise ConfigError(f"{where}: missing required key '{key}'")
    return d[key]


def _check_unknown(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")


def _as_int(v: Any, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}: expected an integer, got {v!r}")
    return v


def _as_num(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _block_from_dict(d: dict, where: str) -> BlockSpec:
    _check_unknown(d, {"n", "p", "m_prime", "c", "m", "k_mode"}, where)
    k_mode = d.get("k_mode", "full")
    if not (k_mode == "full" or isinstance(k_mode, int) and not isinstance(k_mode, bool)):
        raise ConfigError(f"{where}.k_mode: expected 'full' or an integer, got {k_mode!r}")
    return BlockSpec(
        n=_as_int(_require(d, "n", where), f"{where}.n"),
        p=_as_int(_require(d, "p", where), f"{where}.p"),
        m_prime=_as_int(_require(d, "m_prime", where), f"{where}.m_prime"),
        c=_as_int(_require(d, "c", where), f"{where}.c"),
        m=_as_int(_require(d, "m", where), f"{where}.m"),
        k_mode=k_mode,
    )


def _architecture_from_dict(d: dict) -> ArchitectureConfig:
    where = "architecture"
    _check_unknown(d, {"blocks", "classes"}, where)
    raw_blocks = _require(d, "blocks", where)
    if not isinstance(raw_blocks, list) or not raw_blocks:
        raise ConfigError(f"{where}.blocks: expected a nonempty list")
    blocks = tuple(
        _block_from_dict(b, f"{where}.blocks[{i}]") for i, b in enumerate(raw_blocks)
    )
    return ArchitectureConfig(blocks=blocks, classes=_as_int(_require(d, "classes", where), f"{where}.classes"))


def _loss_from_dict(d: dict) -> LossConfig:
    where = "loss"
    _check_unknown(d, {"lambda", "mi_epsilon", "mi_sign"}, where)
    return LossConfig(
        mi_weight=_as_num(d.get("lambda", 0.1), f"{where}.lambda"),
        mi_epsilon=_as_num(d.get("mi_epsilon", 1e-8), f"{where}.mi_epsilon"),
        mi_sign=d.get("mi_sign", "as_printed"),
    )


def _schedule_from_dict(d: dict) -> ScheduleConfig:
    where = "optimizer.schedule"
    _check_unknown(d, {"kind", "t0"}, where)
    return ScheduleConfig(
        kind=_require(d, "kind", where),
        t0=_as_num(d.get("t0", 50.0), f"{where}.t0"),
    )


def _optimizer_from_dict(d: dict) -> OptimizerConfig:
    where = "optimizer"
    _check_unknown(
        d,
        {
            "eta",
            "schedule",
            "max_epochs",
            "batch_size",
            "early_stop",
            "convergence_threshold",
            "convergence_window",
            "importance_lr_scale",
        },
        where,
    )
    sched = d.get("schedule", {"kind": "constant"})
    if not isinstance(sched, dict):
        raise ConfigError(f"{where}.schedule: expected an object")
    return OptimizerConfig(
        eta=_as_num(d.get("eta", 0.01), f"{where}.eta"),
        schedule=_schedule_from_dict(sched),
        max_epochs=_as_int(d.get("max_epochs", 200), f"{where}.max_epochs"),
        batch_size=_as_int(d.get("batch_size", 50), f"{where}.batch_size"),
        early_stop=bool(d.get("early_stop", True)),
        convergence_threshold=_as_num(d.get("convergence_threshold", 1e-3), f"{where}.convergence_threshold"),
        convergence_window=_as_int(d.get("convergence_window", 10), f"{where}.convergence_window"),
        importance_lr_scale=_as_num(d.get("importance_lr_scale", 1.0), f"{where}.importance_lr_scale"),
    )


def _karcher_from_dict(d: dict) -> KarcherConfig:
    where = "karcher"
    _check_unknown(d, {"alpha", "tol", "max_iter"}, where)
    return KarcherConfig(
        alpha=_as_num(d.get("alpha", 1.0), f"{where}.alpha"),
        tol=_as_num(d.get("tol", 1e-8), f"{where}.tol"),
        max_iter=_as_int(d.get("max_iter", 100), f"{where}.max_iter"),
    )


def _spdbn_from_dict(d: dict) -> SpdBnConfig:
    where = "spdbn"
    _check_unknown(d, {"momentum", "mean_lr", "barycenter_tol", "barycenter_max_iter"}, where)
    return SpdBnConfig(
        momentum=_as_num(d.get("momentum", 0.1), f"{where}.momentum"),
        mean_lr=_as_num(d.get("mean_lr", 0.01), f"{where}.mean_lr"),
        barycenter_tol=_as_num(d.get("barycenter_tol", 1e-8), f"{where}.barycenter_tol"),
        barycenter_max_iter=_as_int(d.get("barycenter_max_iter", 50), f"{where}.barycenter_max_iter"),
    )


def _synthetic_from_dict(d: dict) -> SyntheticSpec:
    where = "data.synthetic"
    _check_unknown(
        d,
        {"classes", "n", "d", "sigma", "frames", "train_per_class", "test_per_class",
         "min_separation", "max_redraws"},
        where,
    )
    return SyntheticSpec(
        classes=_as_int(_require(d, "classes", where), f"{where}.classes"),
        n=_as_int(_require(d, "n", where), f"{where}.n"),
        d=_as_int(_require(d, "d", where), f"{where}.d"),
        sigma=_as_num(_require(d, "sigma", where), f"{where}.sigma"),
        frames=_as_int(_require(d, "frames", where), f"{where}.frames"),
        train_per_class=_as_int(_require(d, "train_per_class", where), f"{where}.train_per_class"),
        test_per_class=_as_int(_require(d, "test_per_class", where), f"{where}.test_per_class"),
        min_separation=_as_num(d.get("min_separation", 0.3), f"{where}.min_separation"),
        max_redraws=_as_int(d.get("max_redraws", 100), f"{where}.max_redraws"),
    )


def _data_from_dict(d: dict) -> DataConfig:
    where = "data"
    _check_unknown(d, {"synthetic", "manifest", "test_manifest"}, where)
    synthetic = d.get("synthetic")
    if synthetic is not None:
        if not isinstance(synthetic, dict):
            raise ConfigError(f"{where}.synthetic: expected an object")
        synthetic = _synthetic_from_dict(synthetic)
    manifest = d.get("manifest")
    test_manifest = d.get("test_manifest")
    if synthetic is None and manifest is None:
        raise ConfigError(f"{where}: provide either 'synthetic' or 'manifest'")
    if synthetic is not None and manifest is not None:
        raise ConfigError(f"{where}: 'synthetic' and 'manifest' are mutually exclusive")
    return DataConfig(synthetic=synthetic, manifest=manifest, test_manifest=test_manifest)


def _ablation_from_dict(d: dict) -> AblationConfig:
    where = "ablation"
    _check_unknown(d, {"seeds", "m_prime_values", "mi_signs", "max_epochs"}, where)
    seeds = d.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError(f"{where}.seeds: expected a nonempty list of integers")
    mpv = d.get("m_prime_values")
    if mpv is not None and (not isinstance(mpv, list) or not mpv):
        raise ConfigError(f"{where}.m_prime_values: expected a nonempty list of integers")
    signs = d.get("mi_signs")
    if signs is not None and (not isinstance(signs, list) or not signs):
        raise ConfigError(f"{where}.mi_signs: expected a nonempty list")
    max_epochs = d.get("max_epochs")
    if max_epochs is not None:
        max_epochs = _as_int(max_epochs, f"{where}.max_epochs")
    return AblationConfig(
        seeds=tuple(_as_int(s, f"{where}.seeds") for s in seeds),
        m_prime_values=None if mpv is None else tuple(_as_int(v, f"{where}.m_prime_values") for v in mpv),
        mi_signs=None if signs is None else tuple(str(s) for s in signs),
        max_epochs=max_epochs,
    )


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root: expected a JSON object")
    _check_unknown(
        d,
        {"architecture", "data", "loss", "optimizer", "karcher", "spdbn", "reorth",
         "fusion_weights", "seed", "ablation"},
        "config root",
    )
    arch_raw = _require(d, "architecture", "config root")
    data_raw = _require(d, "data", "config root")
    fusion_weights = d.get("fusion_weights")
    if fusion_weights is not None:
        if not isinstance(fusion_weights, list) or not fusion_weights:
            raise ConfigError("fusion_weights: expected a nonempty list of numbers")
        fusion_weights = tuple(_as_num(v, "fusion_weights") for v in fusion_weights)
    ablation = d.get("ablation")
    cfg = RunConfig(
        architecture=_architecture_from_dict(arch_raw),
        data=_data_from_dict(data_raw),
        loss=_loss_from_dict(d.get("loss", {})),
        optimizer=_optimizer_from_dict(d.get("optimizer", {})),
        karcher=_karcher_from_dict(d.get("karcher", {})),
        spdbn=_spdbn_from_dict(d.get("spdbn", {})),
        reorth=d.get("reorth", "qr"),
        fusion_weights=fusion_weights,
        seed=_as_int(d.get("seed", 0), "seed"),
        ablation=None if ablation is None else _ablation_from_dict(ablation),
    )
    validate_config(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def validate_config(cfg: RunConfig) -> None:
    arch = cfg.architecture
    if arch.classes < 2:
        raise ConfigError(f"architecture.classes must be >= 2, got {arch.classes}")
    for i, blk in enumerate(arch.blocks):
        where = f"architecture.blocks[{i}]"
        if blk.n < 1 or blk.m < 1 or blk.c < 1 or blk.m_prime < 1:
            raise ConfigError(f"{where}: dimensions must be positive")
        k = blk.resolved_k()
        if k < 1 or k > blk.n:
            raise ConfigError(f"{where}.k_mode: k = {k} must lie in [1, n = {blk.n}]")
        if blk.p < 1 or blk.p > blk.n:
            raise InvalidPError(f"{where}: p = {blk.p} must lie in [1, n = {blk.n}]")
        if blk.p > k:
            raise InvalidPError(f"{where}: p = {blk.p} exceeds the atom count k = {k}")
        if blk.p > blk.m:
            raise InvalidPError(f"{where}: p = {blk.p} exceeds the channel dimension m = {blk.m}")
        if blk.m > blk.n:
            raise ConfigError(
                f"{where}: m = {blk.m} exceeds n = {blk.n}; channel maps need n >= m"
            )
    for i in range(len(arch.blocks) - 1):
        if arch.blocks[i + 1].n != arch.blocks[i].m:
            raise ChainMismatchError(
                f"architecture.blocks[{i + 1}].n = {arch.blocks[i + 1].n} does not chain "
                f"from blocks[{i}].m = {arch.blocks[i].m}"
            )
    if cfg.reorth not in ("qr", "svd"):
        raise ConfigError(f"reorth must be 'qr' or 'svd', got {cfg.reorth!r}")
    if cfg.loss.mi_sign not in ("as_printed", "complementarity"):
        raise ConfigError(f"loss.mi_sign must be 'as_printed' or 'complementarity', got {cfg.loss.mi_sign!r}")
    if cfg.loss.mi_epsilon <= 0:
        raise ConfigError("loss.mi_epsilon must be positive")
    sched = cfg.optimizer.schedule
    if sched.kind not in ("constant", "inverse_decay"):
        raise ConfigError(f"optimizer.schedule.kind must be 'constant' or 'inverse_decay', got {sched.kind!r}")
    if sched.kind == "inverse_decay" and sched.t0 <= 0:
        raise ConfigError("optimizer.schedule.t0 must be positive")
    if cfg.optimizer.eta <= 0:
        raise ConfigError("optimizer.eta must be positive")
    if cfg.optimizer.max_epochs < 0:
        raise ConfigError("optimizer.max_epochs must be >= 0 (0 trains nothing)")
    if cfg.optimizer.batch_size < 1:
        raise ConfigError("optimizer.batch_size must be >= 1")
    if cfg.karcher.tol <= 0 or cfg.karcher.max_iter < 1:
        raise ConfigError("karcher.tol must be positive and karcher.max_iter >= 1")
    if not (0.0 < cfg.spdbn.momentum < 1.0):
        raise ConfigError(f"spdbn.momentum must lie in (0, 1), got {cfg.spdbn.momentum}")
    if not (0.0 < cfg.spdbn.mean_lr <= 1.0):
        raise ConfigError(f"spdbn.mean_lr must lie in (0, 1], got {cfg.spdbn.mean_lr}")
    if cfg.fusion_weights is not None:
        for i, blk in enumerate(arch.blocks):
            if len(cfg.fusion_weights) != blk.m_prime:
                raise ConfigError(
                    f"fusion_weights has {len(cfg.fusion_weights)} entries but "
                    f"architecture.blocks[{i}].m_prime = {blk.m_prime}"
                )
        if any(w < 0 for w in cfg.fusion_weights) or sum(cfg.fusion_weights) <= 0:
            raise ConfigError("fusion_weights must be nonnegative with positive sum")
    if cfg.loss.mi_sign and cfg.ablation and cfg.ablation.mi_signs:
        for s in cfg.ablation.mi_signs:
            if s not in ("as_printed", "complementarity"):
                raise ConfigError(f"ablation.mi_signs: invalid entry {s!r}")
    if cfg.data.synthetic is not None:
        syn = cfg.data.synthetic
        if syn.classes < 2 or syn.n < 1 or syn.d < 1 or syn.frames < 2:
            raise ConfigError("data.synthetic: classes >= 2, n >= 1, d >= 1, frames >= 2 required")
        if syn.d > syn.n:
            raise ConfigError("data.synthetic: d must not exceed n")
        if syn.sigma < 0:
            raise ConfigError("data.synthetic: sigma must be nonnegative")
        if syn.train_per_class < 1 or syn.test_per_class < 0:
            raise ConfigError("data.synthetic: train_per_class >= 1 and test_per_class >= 0 required")
        if syn.n != cfg.architecture.blocks[0].n:
            raise ConfigError(
                f"data.synthetic.n = {syn.n} does not match architecture.blocks[0].n = "
                f"{cfg.architecture.blocks[0].n}"
            )
        if syn.classes != cfg.architecture.classes:
            raise ConfigError(
                f"data.synthetic.classes = {syn.classes} does not match architecture.classes = "
                f"{cfg.architecture.classes}"
            )


# --- echo back to plain dicts (checkpoint config echo) ----------------------


def config_to_dict(cfg: RunConfig) -> dict:
    d: dict[str, Any] = {
        "architecture": {
            "blocks": [
                {
                    "n": b.n,
                    "p": b.p,
                    "m_prime": b.m_prime,
                    "c": b.c,
                    "m": b.m,
                    "k_mode": b.k_mode,
                }
                for b in cfg.architecture.blocks
            ],
            "classes": cfg.architecture.classes,
        },
        "data": {},
        "loss": {
            "lambda": cfg.loss.mi_weight,
            "mi_epsilon": cfg.loss.mi_epsilon,
            "mi_sign": cfg.loss.mi_sign,
        },
        "optimizer": {
            "eta": cfg.optimizer.eta,
            "schedule": {"kind": cfg.optimizer.schedule.kind, "t0": cfg.optimizer.schedule.t0},
            "max_epochs": cfg.optimizer.max_epochs,
            "batch_size": cfg.optimizer.batch_size,
            "early_stop": cfg.optimizer.early_stop,
            "convergence_threshold": cfg.optimizer.convergence_threshold,
            "convergence_window": cfg.optimizer.convergence_window,
            "importance_lr_scale": cfg.optimizer.importance_lr_scale,
        },
        "karcher": {
            "alpha": cfg.karcher.alpha,
            "tol": cfg.karcher.tol,
            "max_iter": cfg.karcher.max_iter,
        },
        "spdbn": {
            "momentum": cfg.spdbn.momentum,
            "mean_lr": cfg.spdbn.mean_lr,
            "barycenter_tol": cfg.spdbn.barycenter_tol,
            "barycenter_max_iter": cfg.spdbn.barycenter_max_iter,
        },
        "reorth": cfg.reorth,
        "seed": cfg.seed,
    }
    if cfg.data.synthetic is not None:
        s = cfg.data.synthetic
        d["data"]["synthetic"] = {
            "classes": s.classes,
            "n": s.n,
            "d": s.d,
            "sigma": s.sigma,
            "frames": s.frames,
            "train_per_class": s.train_per_class,
            "test_per_class": s.test_per_class,
            "min_separation": s.min_separation,
            "max_redraws": s.max_redraws,
        }
    if cfg.data.manifest is not None:
        d["data"]["manifest"] = cfg.data.manifest
    if cfg.data.test_manifest is not None:
        d["data"]["test_manifest"] = cfg.data.test_manifest
    if cfg.fusion_weights is not None:
        d["fusion_weights"] = list(cfg.fusion_weights)
    if cfg.ablation is not None:
        ab: dict[str, Any] = {"seeds": list(cfg.ablation.seeds)}
        if cfg.ablation.m_prime_values is not None:
            ab["m_prime_values"] = list(cfg.ablation.m_prime_values)
        if cfg.ablation.mi_signs is not None:
            ab["mi_signs"] = list(cfg.ablation.mi_signs)
        if cfg.ablation.max_epochs is not None:
            ab["max_epochs"] = cfg.ablation.max_epochs
        d["ablation"] = ab
    return d
