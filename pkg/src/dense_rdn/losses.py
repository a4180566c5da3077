"""Loss terms over trajectories and their weighted composition.

Time sampling: a loss evaluation draws step indices ``s`` uniformly without
replacement from ``[0, T)``; state terms look at ``X_{s+1}`` and step terms at
``dX_s`` (the increment that produced it). Batch entries are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from dense_rdn import thermo
from dense_rdn.diffcore import Tensor, ops
from dense_rdn.diffcore.tensor import as_tensor

TERMS = ("target", "stability", "dissipation", "z_reconstruction", "replication", "variance", "step_penalty")


@dataclass(frozen=True)
class LossConfig:
    target_weight: float = 0.0
    target_species: int = 0
    norm: str = "l2"  # "l2" or "rmsd", for target and replication terms
    stability_weight: float = 0.0  # lambda_Delta
    stability_reduction: str = "sum"  # "sum" (plain L1 norm) or "mean" over species and cells
    dissipation_weight: float = 0.0
    dissipation_channels: str = "both"  # "both" | "diffusion" | "reaction"
    variance_lambda: float = 1.0  # lambda_sigma
    z_weight: float = 0.0  # lambda_z
    replication_weight: float = 0.0
    shift: int | None = None  # w in rows; None means U // 4
    variance_target_weight: float = 0.0
    beta_star: float = 1.0
    step_weight: float = 0.0  # lambda_delta
    delta_max: float = 0.05
    n_time_samples: int = 8
    k_B: float = 1.0

    def __post_init__(self):
        weights = (
            self.target_weight, self.stability_weight, self.dissipation_weight, self.variance_lambda,
            self.z_weight, self.replication_weight, self.variance_target_weight, self.step_weight,
        )
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")
        if self.delta_max <= 0:
            raise ValueError("delta_max must be positive")
        if self.stability_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown stability reduction {self.stability_reduction!r}")
        if self.norm not in ("l2", "rmsd"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.dissipation_channels not in ("both", "diffusion", "reaction"):
            raise ValueError(f"unknown dissipation channels {self.dissipation_channels!r}")
        if self.n_time_samples < 1:
            raise ValueError("n_time_samples must be at least 1")

    @property
    def enabled(self) -> list[str]:
        on = []
        if self.target_weight > 0:
            on.append("target")
        if self.stability_weight > 0:
            on.append("stability")
        if self.dissipation_weight > 0:
            on.append("dissipation")
        if self.z_weight > 0:
            on.append("z_reconstruction")
        if self.replication_weight > 0:
            on.append("replication")
        if self.variance_target_weight > 0:
            on.append("variance")
        if self.step_weight > 0:
            on.append("step_penalty")
        return on

    @property
    def needs_dense_trajectory(self) -> bool:
        return any(t in self.enabled for t in ("target", "stability", "dissipation", "z_reconstruction"))


# Diffusive dissipation at these grid units is ~1e-3 per cell, so exp(-sigma) would sit at 1 and the
# step penalty would dominate; the diffusion-channel presets measure entropy in units of k_B = 100.
DIFFUSION_K_B = 100.0

PRESETS: dict[str, LossConfig] = {
    # the stability norm is averaged over entries in the pattern presets; see the stability_loss docstring
    "pattern": LossConfig(
        target_weight=1.0, stability_weight=100.0, stability_reduction="mean", step_weight=1000.0, delta_max=0.05
    ),
    "pattern-dynamic": LossConfig(
        target_weight=1.0, stability_weight=100.0, stability_reduction="mean", step_weight=1000.0, delta_max=0.05
    ),
    "dissipation-total": LossConfig(
        dissipation_weight=1.0, dissipation_channels="both", variance_lambda=1.0, step_weight=1000.0, delta_max=0.05
    ),
    "dissipation-diffusion": LossConfig(
        dissipation_weight=1.0, dissipation_channels="diffusion", variance_lambda=1.0, step_weight=1000.0,
        delta_max=0.05, k_B=DIFFUSION_K_B,
    ),
    "dissipative-distribution": LossConfig(
        dissipation_weight=1.0, dissipation_channels="diffusion", variance_lambda=0.04, z_weight=1.0,
        step_weight=1000.0, delta_max=0.05, k_B=DIFFUSION_K_B,
    ),
    "replication": LossConfig(
        replication_weight=1.0, variance_target_weight=1.0, beta_star=1.0, step_weight=1.0, delta_max=0.3
    ),
}


def preset(name: str, **overrides: Any) -> LossConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown loss preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def sample_times(rng: np.random.Generator, T: int, count: int = 8) -> np.ndarray:
    """Sorted step indices in ``[0, T)``, uniform without replacement."""
    if T <= 0:
        raise ValueError("trajectory has no steps to sample")
    if count >= T:
        return np.arange(T)
    return np.sort(rng.choice(T, size=count, replace=False))


# --------------------------------------------------------------------- norms


def _l2(diff: Tensor, axes, mode: str = "l2") -> Tensor:
    sq = diff * diff
    red = sq.mean(axis=axes) if mode == "rmsd" else sq.sum(axis=axes)
    return ops.sqrt(red)


# --------------------------------------------------------------------- terms


def target_pattern_loss(traj, target, species_i: int, sampled_times, mode: str = "l2") -> Tensor:
    """Mean over sampled steps of ``||X_{s+1}^i - target||`` (L2 or RMSD)."""
    n_species = traj.states[0].shape[1]
    if not 0 <= species_i < n_species:
        raise IndexError(f"species index {species_i} out of range for {n_species} species")
    target = np.asarray(target, dtype=np.float64)
    vals = []
    for s in sampled_times:
        x = traj.states[int(s) + 1][:, species_i]
        vals.append(_l2(x - target, (1, 2), mode).mean())
    return ops.stack(vals).mean()


def stability_loss(traj, sampled_times, reduction: str = "sum") -> Tensor:
    """Mean over sampled steps of ``||dX_s||_1``.

    ``reduction="mean"`` divides the norm by the number of entries per state.
    The pattern presets use it: with the plain sum and weight 100 the
    stability term outweighs the target term by orders of magnitude and the
    optimizer settles on a uniform field.
    """
    vals = []
    for s in sampled_times:
        a = ops.abs_(traj.deltas[int(s)])
        vals.append((a.sum(axis=(1, 2, 3)) if reduction == "sum" else a.mean(axis=(1, 2, 3))).mean())
    return ops.stack(vals).mean()


def dissipation_loss(traj, params, channels: str = "both", variance_lambda: float = 1.0,
                     sampled_times=None, k_B: float = 1.0) -> Tensor:
    """``mean_t exp(-sigma_sel(X_t)) + lambda_sigma * Var_t[exp(-sigma_tot(X_t))]``.

    sigma values are cell means of the instantaneous rates. With
    ``sampled_times`` the states ``X_{s+1}`` are used, else all states.
    """
    if not traj.states:
        raise ValueError("empty trajectory")
    states = traj.states if sampled_times is None else [traj.states[int(s) + 1] for s in sampled_times]
    k = params.rate_vector()
    sel, tot = [], []
    for x in states:
        r = thermo.sigma_rxn(x, params.crn, k, k_B).mean()
        d = thermo.sigma_dif(x, params.D, params.h, k_B).mean()
        s = {"both": r + d, "diffusion": d, "reaction": r}[channels]
        sel.append(ops.exp(-s))
        tot.append(ops.exp(-(r + d)))
    mean_term = ops.stack(sel).mean()
    if variance_lambda == 0:
        return mean_term
    return mean_term + ops.stack(tot).var() * variance_lambda


def z_reconstruction_loss(traj, z, encoder, encoder_params, sampled_times) -> Tensor:
    """Mean over sampled states of the per-bit binary cross-entropy of ``z`` from the decoder."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    vals = []
    for s in sampled_times:
        logits = encoder(traj.states[int(s) + 1], encoder_params)
        vals.append(ops.bce_with_logits(logits, z).mean())
    return ops.stack(vals).mean()


def replication_loss(x0, x_final, w: int, mode: str = "l2") -> Tensor:
    """``||X_0 - T_{-w} X_T|| + ||X_0 - T_{+w} X_T||`` with periodic vertical shifts."""
    x0, x_final = as_tensor(x0), as_tensor(x_final)
    height = x0.shape[2]
    if not 0 <= w < height:
        raise ValueError(f"shift {w} must lie in [0, {height})")
    up = _l2(x0 - ops.roll(x_final, -w, axis=2), (1, 2, 3), mode)
    down = _l2(x0 - ops.roll(x_final, w, axis=2), (1, 2, 3), mode)
    return (up + down).mean()


def variance_target_loss(x_final, beta_star: float) -> Tensor:
    """``(1/S) sum_i max(0, beta* - std_uv(X_T^i))^2``."""
    x_final = as_tensor(x_final)
    std = ops.sqrt(x_final.var(axis=(2, 3)))
    gap = ops.maximum(beta_star - std, 0.0)
    return (gap * gap).mean(axis=1).mean()


def step_excess(dx, delta_max: float) -> Tensor:
    """Per-step sum of ``max(|dX| - delta_max, 0)`` over species and cells, batch-averaged."""
    return ops.maximum(ops.abs_(dx) - delta_max, 0.0).sum(axis=(1, 2, 3)).mean()


def step_size_penalty(traj, delta_max: float, step_weight: float) -> Tensor:
    """``lambda_delta / (U V T) * sum_{t, cells} max(|dX_t| - delta_max, 0)``."""
    u, v = traj.states[0].shape[2:]
    T = traj.T
    if T == 0:
        return Tensor(0.0)
    if traj.deltas:
        total = ops.stack([step_excess(dx, delta_max) for dx in traj.deltas]).sum()
    elif traj.step_term_sums:
        total = traj.step_term_sums[0]
    else:
        raise ValueError("trajectory holds neither deltas nor a recorded step-penalty sum")
    return total * (step_weight / (u * v * T))


@dataclass
class LossContext:
    """Everything besides the trajectory that loss terms may need."""

    params: Any
    target: np.ndarray | None = None
    z: np.ndarray | None = None
    encoder: Any = None
    encoder_params: Mapping | None = None


@dataclass
class LossResult:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)
    sampled_times: np.ndarray | None = None


def compose_loss(config: LossConfig, traj, context: LossContext, rng: np.random.Generator) -> LossResult:
    """Weighted sum of every enabled term; time indices are drawn once per call."""
    enabled = config.enabled
    if not enabled:
        raise ValueError("no loss terms enabled")
    sampled = None
    if config.needs_dense_trajectory:
        if not traj.dense:
            raise ValueError("state-sampled loss terms need a dense trajectory")
        sampled = sample_times(rng, traj.T, config.n_time_samples)
    parts: dict[str, Tensor] = {}
    if "target" in enabled:
        if context.target is None:
            raise ValueError("target loss enabled but no target image configured")
        parts["target"] = target_pattern_loss(traj, context.target, config.target_species, sampled, config.norm) \
            * config.target_weight
    if "stability" in enabled:
        parts["stability"] = stability_loss(traj, sampled, config.stability_reduction) * config.stability_weight
    if "dissipation" in enabled:
        parts["dissipation"] = dissipation_loss(
            traj, context.params, config.dissipation_channels, config.variance_lambda, sampled, config.k_B
        ) * config.dissipation_weight
    if "z_reconstruction" in enabled:
        if context.encoder is None or context.z is None:
            raise ValueError("z reconstruction enabled but no encoder or z given")
        parts["z_reconstruction"] = z_reconstruction_loss(
            traj, context.z, context.encoder, context.encoder_params, sampled
        ) * config.z_weight
    if "replication" in enabled:
        w = config.shift if config.shift is not None else traj.states[0].shape[2] // 4
        parts["replication"] = replication_loss(traj.x0, traj.final, w, config.norm) * config.replication_weight
    if "variance" in enabled:
        parts["variance"] = variance_target_loss(traj.final, config.beta_star) * config.variance_target_weight
    if "step_penalty" in enabled:
        parts["step_penalty"] = step_size_penalty(traj, config.delta_max, config.step_weight)
    total = None
    for v in parts.values():
        total = v if total is None else total + v
    return LossResult(total, {k: v.item() for k, v in parts.items()}, sampled)
