"""Fine-tuning schedules: gradual unfreezing, discriminative per-layer
learning rates, the slanted triangular learning rate, and early stopping.

The ablation conditions (vanilla / +guf / +guf+discr+tlr) are expressed
purely through ScheduleConfig flags; the training loop contains no
condition-specific branching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import HEAD_GROUPS, PARAM_GROUPS

# groups whose learning rate is divided by discr_ratio and which guf keeps
# frozen during the first phase
LOWER_GROUPS = frozenset({"embedding", "shared_birnn"})
UPPER_GROUPS = frozenset(PARAM_GROUPS) - LOWER_GROUPS


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 5e-4
    max_epochs: int = 25
    patience: int = 5
    use_guf: bool = False
    use_discr: bool = False
    use_tlr: bool = False
    unfreeze_epoch: int = 12  # guf phase boundary; typical range 10-15
    phase2_lr: float | None = None  # all-unfrozen phase; defaults to base_lr
    discr_ratio: float = 2.5  # lower-layer lr = upper lr / ratio
    tlr_peak: float | None = None  # defaults to the phase's base rate
    tlr_warm_fraction: float = 1.0 / 8.0
    tlr_floor_ratio: float = 10.0  # start (and end) lr = peak / ratio

    def __post_init__(self):
        if self.base_lr <= 0 or self.discr_ratio <= 0 or self.tlr_floor_ratio <= 0:
            raise ValueError("rates and ratios must be positive")
        if not 0 < self.tlr_warm_fraction < 1:
            raise ValueError("tlr_warm_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.unfreeze_epoch < 0:
            raise ValueError("unfreeze_epoch must be >= 0")

    @classmethod
    def vanilla(cls, base_lr: float = 5e-4, **kw) -> "ScheduleConfig":
        return cls(base_lr=base_lr, **kw)

    @classmethod
    def guf(cls, base_lr: float = 5e-4, **kw) -> "ScheduleConfig":
        return cls(base_lr=base_lr, use_guf=True, **kw)

    @classmethod
    def guf_discr_tlr(cls, base_lr: float = 5e-4, **kw) -> "ScheduleConfig":
        return cls(base_lr=base_lr, use_guf=True, use_discr=True, use_tlr=True, **kw)


def _triangle(
    step: int, total: int, peak: float, warm_fraction: float, floor_ratio: float
) -> float:
    if total <= 0:
        raise ValueError("total updates must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    floor = peak / floor_ratio
    peak_step = max(int(total * warm_fraction), 1)
    if step <= peak_step:
        return floor + (peak - floor) * step / peak_step
    return peak - (peak - floor) * (step - peak_step) / (total - peak_step)


def tlr_lr(step: int, total: int, cfg: ScheduleConfig) -> float:
    """Slanted triangular rate at ``step`` of ``total`` planned updates.

    Rises linearly from peak/floor_ratio to the peak at
    floor(total * warm_fraction), then falls linearly back to the same floor
    at step ``total``.
    """
    peak = cfg.tlr_peak if cfg.tlr_peak is not None else cfg.base_lr
    return _triangle(step, total, peak, cfg.tlr_warm_fraction, cfg.tlr_floor_ratio)


def group_lr(group: str, base: float, cfg: ScheduleConfig) -> float:
    """Discriminative rate: lower layers run at base / discr_ratio."""
    if group not in PARAM_GROUPS:
        raise KeyError(f"unknown parameter group {group!r}")
    if cfg.use_discr and group in LOWER_GROUPS:
        return base / cfg.discr_ratio
    return base


def unfreeze_plan(epoch: int, cfg: ScheduleConfig) -> frozenset[str]:
    """Trainable groups at ``epoch``: heads first under guf, then everything."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.use_guf and epoch < cfg.unfreeze_epoch:
        return UPPER_GROUPS
    return frozenset(PARAM_GROUPS)


def phase_base_lr(epoch: int, cfg: ScheduleConfig) -> float:
    """Constant base rate of the phase containing ``epoch`` (before tlr)."""
    if cfg.use_guf and epoch >= cfg.unfreeze_epoch and cfg.phase2_lr is not None:
        return cfg.phase2_lr
    return cfg.base_lr


def effective_lr(
    group: str, epoch: int, step: int, total: int, cfg: ScheduleConfig
) -> float:
    """Learning rate of one group at one update: tlr then discr, gated by guf.

    ``step``/``total`` count updates within the phase where tlr applies (the
    all-unfrozen phase under guf, the whole run otherwise).
    """
    base = phase_base_lr(epoch, cfg)
    in_tlr_phase = not cfg.use_guf or epoch >= cfg.unfreeze_epoch
    if cfg.use_tlr and in_tlr_phase:
        peak = cfg.tlr_peak if cfg.tlr_peak is not None else base
        base = _triangle(step, total, peak, cfg.tlr_warm_fraction, cfg.tlr_floor_ratio)
    return group_lr(group, base, cfg)


def early_stop(history: list[float]) -> int:
    """Index of the best dev metric (IC + ET score sum); ties go earliest."""
    if not history:
        raise ValueError("empty metric history")
    best = max(history)
    return history.index(best)


def should_stop(history: list[float], cfg: ScheduleConfig) -> bool:
    """True once ``patience`` epochs pass without improvement or the cap hits."""
    if len(history) >= cfg.max_epochs:
        return True
    best_epoch = early_stop(history) if history else -1
    return len(history) - 1 - best_epoch >= cfg.patience


@dataclass
class TrainState:
    """Mutable bookkeeping for one supervised training run."""

    total_updates: int
    epoch: int = 0
    step: int = 0  # global update counter
    phase_step: int = 0  # update counter within the tlr phase
    trainable: frozenset[str] = field(default_factory=frozenset)
    group_lrs: dict[str, float] = field(default_factory=dict)
    dev_history: list[float] = field(default_factory=list)
    best_epoch: int = -1
