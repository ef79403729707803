"""Refinement strategies: map (f_prev, errors, memory) to the next model.

Methods
  frozen      keep the deployed model unchanged (reference)
  cft         continual fine-tuning on the errors only
  l2reg       cft plus an L2 penalty toward the previous parameters
  ewc         cft plus a Fisher-weighted penalty (online EWC, decayed
              running-sum Fisher)
  er          experience replay with random selection
  maxloss     replay the candidates with the largest virtual-model loss
  mir         replay the candidates with the largest loss increase
              (maximally interfered retrieval)
  mir_l2reg   mir replay combined with the L2 anchor penalty
  offline     one offline fit on an upstream subset plus all collected
              errors (reference)

Every method returns f_prev untouched when the error set is empty. Replay
methods fire every ``replay_interval`` steps and mix the replayed examples
with the errors in a single fine-tuning batch (mixed tuning); the two-stage
variant fine-tunes on the replayed examples first, then on the errors.
Errors are written to the online memory only after the step's refinement,
so replay sees strictly-past errors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .clusters import Example
from .learner import LearnerState, fine_tune, fisher_diag
from .memory import BiMemory, ReplaySelection, memory_write, select_conditional, select_random

METHODS = (
    "frozen",
    "cft",
    "l2reg",
    "ewc",
    "er",
    "maxloss",
    "mir",
    "mir_l2reg",
    "offline",
)
REPLAY_METHODS = ("er", "maxloss", "mir", "mir_l2reg")
CONDITIONAL_STRATEGY = {"maxloss": "maxloss", "mir": "mir", "mir_l2reg": "mir"}


# penalty weights are scaled to the small learner; None picks these per method
DEFAULT_LAM = {"l2reg": 0.3, "ewc": 10.0, "mir_l2reg": 0.1}


@dataclass(frozen=True)
class RefinerConfig:
    method: str = "cft"
    lr: float = 3e-2
    epochs: int = 20
    batch_size: int = 8
    lam: float | None = None
    ewc_gamma: float = 0.9
    replay_size: int = 32
    replay_interval: int = 1
    candidate_pool: int = 64
    virt_epochs: int = 1
    two_stage: bool = False
    upstream_memory: int | None = None  # None = whole upstream pool
    offline_subset: int = 512

    def resolve(self) -> "RefinerConfig":
        """Fill method-dependent defaults so the config is fully explicit."""
        if self.lam is None:
            return replace(self, lam=DEFAULT_LAM.get(self.method, 0.0))
        return self

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need lr >= 0, epochs >= 0, batch_size >= 1")
        if self.lam is not None and self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 < self.ewc_gamma <= 1.0:
            raise ValueError(f"ewc_gamma must be in (0, 1], got {self.ewc_gamma}")
        if self.replay_interval < 1:
            raise ValueError(f"replay_interval must be >= 1, got {self.replay_interval}")
        if self.method in CONDITIONAL_STRATEGY and self.replay_size > self.candidate_pool:
            raise ValueError(
                f"replay_size {self.replay_size} exceeds candidate_pool {self.candidate_pool}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RefinerConfig":
        return cls(**data)


@dataclass(frozen=True)
class RegAnchor:
    """Previous-model snapshot plus the decayed running Fisher sum."""

    theta_prev: np.ndarray
    fisher_running: np.ndarray

    @classmethod
    def fresh(cls, state: LearnerState) -> "RegAnchor":
        return cls(
            theta_prev=state.theta,
            fisher_running=np.zeros_like(state.theta),
        )


def l2_penalty(theta: np.ndarray, theta_prev: np.ndarray) -> float:
    """Sum of squared coordinate drifts from the anchor."""
    if theta.shape != theta_prev.shape:
        raise ValueError(f"length mismatch: {theta.shape} vs {theta_prev.shape}")
    diff = theta - theta_prev
    return float(diff @ diff)


def ewc_penalty(theta: np.ndarray, anchor: RegAnchor) -> float:
    """Fisher-weighted squared drift: (1/2) sum_i F_i (theta_i - prev_i)^2."""
    if theta.shape != anchor.theta_prev.shape:
        raise ValueError(f"length mismatch: {theta.shape} vs {anchor.theta_prev.shape}")
    diff = theta - anchor.theta_prev
    return float(0.5 * (anchor.fisher_running * diff) @ diff)


def refine_cft(f_prev: LearnerState, errors: Sequence[Example], cfg: RefinerConfig) -> LearnerState:
    """Vanilla continual fine-tuning on the error set."""
    if not errors:
        return f_prev
    return fine_tune(f_prev, errors, cfg.lr, cfg.epochs, batch_size=cfg.batch_size)


def _penalty_grad(cfg: RefinerConfig, anchor: RegAnchor):
    """Analytic gradient of lam * penalty; None when the penalty vanishes."""
    if cfg.lam == 0.0:
        return None
    if cfg.method == "ewc":
        fisher = anchor.fisher_running
        prev = anchor.theta_prev
        return lambda theta: cfg.lam * (fisher * (theta - prev))
    prev = anchor.theta_prev
    return lambda theta: cfg.lam * (2.0 * (theta - prev))


def refine_regularized(
    f_prev: LearnerState,
    errors: Sequence[Example],
    anchor: RegAnchor,
    cfg: RefinerConfig,
) -> tuple[LearnerState, RegAnchor]:
    """Fine-tune on the errors with a parameter-anchor penalty.

    The anchor moves afterwards: theta_prev becomes the returned model's
    parameters, and for EWC the running Fisher sum is decayed and refreshed
    on the just-consolidated errors.
    """
    if not errors:
        return f_prev, anchor
    f_t = fine_tune(
        f_prev,
        errors,
        cfg.lr,
        cfg.epochs,
        batch_size=cfg.batch_size,
        extra_grad=_penalty_grad(cfg, anchor),
    )
    if cfg.method == "ewc":
        fisher = cfg.ewc_gamma * anchor.fisher_running + fisher_diag(f_t, errors).values
    else:
        fisher = anchor.fisher_running
    return f_t, RegAnchor(theta_prev=f_t.theta, fisher_running=fisher)


def _select(
    mem: BiMemory,
    f_prev: LearnerState,
    errors: Sequence[Example],
    cfg: RefinerConfig,
    rng: np.random.Generator,
) -> ReplaySelection:
    strategy = CONDITIONAL_STRATEGY.get(cfg.method)
    if strategy is None:
        return select_random(mem, cfg.replay_size, rng)
    return select_conditional(
        mem,
        f_prev,
        errors,
        r=cfg.replay_size,
        c=cfg.candidate_pool,
        strategy=strategy,
        lr=cfg.lr,
        virt_epochs=cfg.virt_epochs,
        rng=rng,
        batch_size=cfg.batch_size,
    )


def refine_replay(
    f_prev: LearnerState,
    errors: Sequence[Example],
    mem: BiMemory,
    t: int,
    cfg: RefinerConfig,
    rng: np.random.Generator,
) -> LearnerState:
    """Replay-augmented fine-tuning; off-interval steps behave like cft."""
    if not errors:
        return f_prev
    if t % cfg.replay_interval != 0:
        return refine_cft(f_prev, errors, cfg)
    selection = _select(mem, f_prev, errors, cfg, rng)
    if not selection.chosen:
        return refine_cft(f_prev, errors, cfg)
    if cfg.two_stage:
        staged = fine_tune(f_prev, selection.chosen, cfg.lr, cfg.epochs, batch_size=cfg.batch_size)
        return fine_tune(staged, errors, cfg.lr, cfg.epochs, batch_size=cfg.batch_size)
    mixed = list(selection.chosen) + list(errors)
    return fine_tune(f_prev, mixed, cfg.lr, cfg.epochs, batch_size=cfg.batch_size)


def refine_hybrid(
    f_prev: LearnerState,
    errors: Sequence[Example],
    mem: BiMemory,
    anchor: RegAnchor,
    t: int,
    cfg: RefinerConfig,
    rng: np.random.Generator,
) -> tuple[LearnerState, RegAnchor]:
    """MIR replay combined with the L2 anchor penalty."""
    if not errors:
        return f_prev, anchor
    extra = _penalty_grad(cfg, anchor)
    if t % cfg.replay_interval == 0:
        selection = _select(mem, f_prev, errors, cfg, rng)
        batch = list(selection.chosen) + list(errors)
    else:
        batch = list(errors)
    f_t = fine_tune(f_prev, batch, cfg.lr, cfg.epochs, batch_size=cfg.batch_size, extra_grad=extra)
    return f_t, RegAnchor(theta_prev=f_t.theta, fisher_running=anchor.fisher_running)


def offline_refine(
    f_0: LearnerState,
    upstream_subset: Sequence[Example],
    all_errors: Sequence[Example],
    cfg: RefinerConfig,
    rng: np.random.Generator | None = None,
) -> LearnerState:
    """One offline fine-tuning pass on the subset plus every collected error."""
    batch = list(upstream_subset) + list(all_errors)
    if not batch:
        return f_0
    return fine_tune(f_0, batch, cfg.lr, cfg.epochs, batch_size=cfg.batch_size, rng=rng)


class OnlineRefiner:
    """Stateful driver used by the episode loop.

    Owns the method's memory and anchor and applies the write-after-refine
    ordering. One instance per run, used strictly sequentially.
    """

    def __init__(
        self,
        cfg: RefinerConfig,
        upstream_pool: Sequence[Example] = (),
        rng: np.random.Generator | None = None,
    ):
        cfg = cfg.resolve()
        cfg.validate()
        if cfg.method == "offline":
            raise ValueError("the offline reference is not an online refiner")
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.anchor: RegAnchor | None = None
        self.memory: BiMemory | None = None
        if cfg.method in REPLAY_METHODS:
            pool = list(upstream_pool)
            if cfg.upstream_memory is not None:
                pool = pool[: cfg.upstream_memory]
            self.memory = BiMemory.from_upstream(pool)

    def refine(self, f_prev: LearnerState, errors: Sequence[Example], t: int) -> LearnerState:
        if not errors:
            return f_prev
        cfg = self.cfg
        if cfg.method == "frozen":
            return f_prev
        if cfg.method == "cft":
            return refine_cft(f_prev, errors, cfg)
        if cfg.method in ("l2reg", "ewc"):
            if self.anchor is None:
                self.anchor = RegAnchor.fresh(f_prev)
            f_t, self.anchor = refine_regularized(f_prev, errors, self.anchor, cfg)
            return f_t
        if cfg.method == "mir_l2reg":
            if self.anchor is None:
                self.anchor = RegAnchor.fresh(f_prev)
            f_t, self.anchor = refine_hybrid(
                f_prev, errors, self.memory, self.anchor, t, cfg, self.rng
            )
            self.memory = memory_write(self.memory, errors, t)
            return f_t
        # er / maxloss / mir
        f_t = refine_replay(f_prev, errors, self.memory, t, cfg, self.rng)
        self.memory = memory_write(self.memory, errors, t)
        return f_t
