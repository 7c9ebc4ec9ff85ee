"""Averaged latent search with unsupervised validation against a pseudo target.

The attack sees only the generator, the seen encoder with its target feature,
and the validation encoder. Unseen encoders never enter this module.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DegenerateEmbeddingError,
    Mlp,
    cosine_similarity,
    cosine_similarity_grad,
    cosine_similarity_rows,
    mlp_forward,
    mlp_grad_input,
)
from .optimize import AdamState, LrSchedule, adam_step, cyclic_lr_at, lr_at

log = logging.getLogger(__name__)


class NoCandidatesError(RuntimeError):
    pass


class DegeneratePseudoTargetError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    n: int = 100
    T: int = 100
    T0: int = 70
    k_top: int = 10
    base_lr: float = 0.1
    drop_step: int | None = None  # None: halfway through T
    drop_factor: float = 10.0
    init_scale: float = 1.0
    seed: int = 0
    averaging: bool = True
    validation: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not 1 <= self.T0 <= max(self.T, 1):
            raise ValueError(f"T0={self.T0} outside [1, {max(self.T, 1)}]")
        if not 1 <= self.k_top <= self.n:
            raise ValueError(f"k_top={self.k_top} outside [1, n={self.n}]")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        self.schedule  # validates the schedule fields

    @property
    def schedule(self) -> LrSchedule:
        drop = self.drop_step if self.drop_step is not None else max(self.T // 2, 1)
        return LrSchedule(self.base_lr, min(drop, max(self.T, 1)), self.drop_factor, self.T)


def latent_init(seed: int, index: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """Initial latent for slot ``index``; independent of how many slots exist."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, index)))
    return scale * rng.standard_normal(dim)


# -- loss -------------------------------------------------------------------


def seen_similarity(z, G: Mlp, E: Mlp, v) -> np.ndarray | float:
    feats = mlp_forward(E, mlp_forward(G, z))
    if np.ndim(z) == 1:
        return cosine_similarity(feats, v)
    return cosine_similarity_rows(feats, v)


def attack_loss(z, G: Mlp, E_seen: Mlp, v_seen) -> float:
    return -seen_similarity(z, G, E_seen, v_seen)


def attack_loss_grad(z, G: Mlp, E_seen: Mlp, v_seen) -> np.ndarray:
    """Gradient of ``attack_loss`` in ``z``; row-wise for a batch of latents."""
    x = mlp_forward(G, z)
    f = mlp_forward(E_seen, x)
    g_feat = -cosine_similarity_grad(f, v_seen)
    g_img = mlp_grad_input(E_seen, x, g_feat)
    return mlp_grad_input(G, z, g_img)


def _batch_grad(Z: np.ndarray, G, E, v) -> np.ndarray:
    """Batched gradient with non-finite rows marked NaN instead of raising."""
    with np.errstate(all="ignore"):
        try:
            return attack_loss_grad(Z, G, E, v)
        except (DegenerateEmbeddingError, ValueError):
            pass
        out = np.full_like(Z, np.nan)
        for i, z in enumerate(Z):
            try:
                out[i] = attack_loss_grad(z, G, E, v)
            except (DegenerateEmbeddingError, ValueError):
                pass
        return out


# -- multiple latent optimization -------------------------------------------


@dataclass
class LatentBatch:
    trajectories: np.ndarray  # (n, T + 1, d)
    alive: np.ndarray  # (n,) bool
    states: AdamState
    died_at: dict[int, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.trajectories.shape[0]

    @property
    def T(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def initial(self) -> np.ndarray:
        return self.trajectories[:, 0]

    @property
    def final(self) -> np.ndarray:
        return self.trajectories[:, -1]


def run_adam(Z0: np.ndarray, G: Mlp, E: Mlp, v, steps: int, lr_fn) -> LatentBatch:
    """Optimize each row of ``Z0`` independently for ``steps`` iterations."""
    Z = np.array(Z0, dtype=np.float64)
    n, d = Z.shape
    traj = np.empty((n, steps + 1, d))
    traj[:, 0] = Z
    alive = np.ones(n, dtype=bool)
    died_at: dict[int, int] = {}
    state = AdamState.zeros(Z.shape)
    for t in range(steps):
        grad = _batch_grad(Z, G, E, v)
        bad = alive & ~np.all(np.isfinite(grad), axis=1)
        for i in np.flatnonzero(bad):
            died_at[int(i)] = t
            log.warning("latent %d diverged at step %d", i, t)
        alive &= ~bad
        # frozen rows take a zero gradient so they stay put
        grad = np.where(alive[:, None], grad, 0.0)
        new_state, Z_new = adam_step(state, Z, grad, lr_fn(t))
        Z = np.where(alive[:, None], Z_new, Z)
        state = new_state
        traj[:, t + 1] = Z
    if not alive.any():
        raise NoCandidatesError("no candidates: every latent diverged")
    return LatentBatch(traj, alive, state, died_at)


def optimize_latents(cfg: AttackConfig, G: Mlp, E_seen: Mlp, v_seen) -> LatentBatch:
    Z0 = np.stack([latent_init(cfg.seed, i, G.input_dim, cfg.init_scale) for i in range(cfg.n)])
    schedule = cfg.schedule
    return run_adam(Z0, G, E_seen, v_seen, cfg.T, lambda t: lr_at(schedule, t))


def average_trajectory(batch: LatentBatch, T0: int) -> np.ndarray:
    """Mean of the last ``T0`` iterates of every trajectory."""
    if not 1 <= T0 <= batch.trajectories.shape[1]:
        raise ValueError(f"T0={T0} outside [1, {batch.trajectories.shape[1]}]")
    return np.mean(batch.trajectories[:, -T0:], axis=1)


# -- unsupervised validation -------------------------------------------------


def rank_candidates(zbar: np.ndarray, G: Mlp, E_seen: Mlp, v_seen, alive=None) -> list[int]:
    """Indices by decreasing seen similarity; ties keep the lower index first."""
    sims = np.atleast_1d(seen_similarity(np.atleast_2d(zbar), G, E_seen, v_seen))
    idx = range(len(sims)) if alive is None else np.flatnonzero(alive)
    return sorted((int(i) for i in idx), key=lambda i: (-sims[i], i))


def pseudo_target(ranked_zbar: np.ndarray, G: Mlp, E_val: Mlp, k_top: int) -> np.ndarray:
    """Plain (unnormalized) mean validation feature of the top ``k_top`` candidates."""
    if not 1 <= k_top <= len(ranked_zbar):
        raise ValueError(f"k_top={k_top} exceeds {len(ranked_zbar)} candidates")
    feats = mlp_forward(E_val, mlp_forward(G, ranked_zbar[:k_top]))
    target = np.mean(feats, axis=0)
    if np.linalg.norm(target) < 1e-12:
        raise DegeneratePseudoTargetError("degenerate pseudo target")
    return target


def select_latent(ranked_zbar: np.ndarray, G: Mlp, E_val: Mlp, target, k_top: int) -> int:
    """Rank position (0-based) of the top-``k_top`` candidate closest to ``target``."""
    sims = cosine_similarity_rows(mlp_forward(E_val, mlp_forward(G, ranked_zbar[:k_top])), target)
    return int(np.argmax(sims))


@dataclass
class AttackOutcome:
    z_star: np.ndarray
    x_star: np.ndarray
    selected_index: int  # slot of the winner in the original batch
    selected_rank: int  # 0-based position in the seen ranking
    ranking: list[int]
    seen_sims: np.ndarray  # along the ranking, nonincreasing
    candidates: np.ndarray  # averaged latents along the ranking
    final_iterates: np.ndarray  # unaveraged z^(T) along the ranking
    k_top: int
    pseudo_target: np.ndarray | None = None
    val_sims: np.ndarray | None = None  # top-k_top similarities to the pseudo target
    diverged: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "selected_index": self.selected_index,
            "selected_rank": self.selected_rank,
            "k_top": self.k_top,
            "z_star": self.z_star.tolist(),
            "ranking": list(self.ranking),
            "seen_sims": self.seen_sims.tolist(),
            "candidates": self.candidates.tolist(),
            "pseudo_target": None if self.pseudo_target is None else self.pseudo_target.tolist(),
            "val_sims": None if self.val_sims is None else self.val_sims.tolist(),
            "diverged": list(self.diverged),
        }


def finish_attack(batch: LatentBatch, cfg: AttackConfig, G, E_seen, E_val, v_seen) -> AttackOutcome:
    """Average, rank and select from an already optimized batch.

    ``cfg.averaging`` / ``cfg.validation`` switch the two selection stages
    off (window of one, seen top-1), so one batch serves every ablation cell.
    """
    T0 = cfg.T0 if cfg.averaging else 1
    zbar = average_trajectory(batch, min(T0, batch.T + 1))
    order = rank_candidates(zbar, G, E_seen, v_seen, batch.alive)
    ranked = zbar[order]
    sims = np.atleast_1d(seen_similarity(ranked, G, E_seen, v_seen))
    k_top = cfg.k_top
    if k_top > len(order):
        warnings.warn(f"only {len(order)} candidates survived; k_top shrinks from {k_top}")
        k_top = len(order)
    target = val_sims = None
    rank = 0
    if cfg.validation and E_val is not None:
        target = pseudo_target(ranked, G, E_val, k_top)
        rank = select_latent(ranked, G, E_val, target, k_top)
        val_sims = cosine_similarity_rows(mlp_forward(E_val, mlp_forward(G, ranked[:k_top])), target)
    z_star = ranked[rank]
    return AttackOutcome(
        z_star=z_star,
        x_star=mlp_forward(G, z_star),
        selected_index=order[rank],
        selected_rank=rank,
        ranking=order,
        seen_sims=sims,
        candidates=ranked,
        final_iterates=batch.final[order],
        k_top=k_top,
        pseudo_target=target,
        val_sims=val_sims,
        diverged=sorted(batch.died_at),
    )


def alsuv_attack(cfg: AttackConfig, G: Mlp, E_seen: Mlp, E_val: Mlp | None, v_seen) -> AttackOutcome:
    batch = optimize_latents(cfg, G, E_seen, v_seen)
    return finish_attack(batch, cfg, G, E_seen, E_val, v_seen)


def serial_baseline(cfg: AttackConfig, G: Mlp, E_seen: Mlp, v_seen, total_steps: int,
                    period: int | None = None) -> AttackOutcome:
    """One latent run for ``total_steps`` under a cyclic step-drop schedule.

    The latent starts from slot 0 of ``cfg.seed``, the same start as the
    first latent of a multi-latent run, and the final iterate is returned.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    period = period or cfg.T or total_steps
    base = cfg.schedule
    drop = max(1, round(total_steps * base.drop_step / max(base.total_steps, 1)))
    schedule = LrSchedule(base.base_lr, min(drop, total_steps), base.drop_factor, total_steps)

    def lr_fn(t):
        return cyclic_lr_at(schedule, t, period)

    z0 = latent_init(cfg.seed, 0, G.input_dim, cfg.init_scale)[None, :]
    batch = run_adam(z0, G, E_seen, v_seen, total_steps, lr_fn)
    single = AttackConfig(n=1, T=total_steps, T0=1, k_top=1, base_lr=cfg.base_lr,
                          drop_factor=cfg.drop_factor, seed=cfg.seed, averaging=False,
                          validation=False)
    return finish_attack(batch, single, G, E_seen, None, v_seen)
