"""Controls and reporting: ablations, metric time series, time-step refinement, PCA renders, CRN graphs."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from dense_rdn import thermo
from dense_rdn.crn import CrnSpec
from dense_rdn.diffcore import NonFiniteError, Tensor
from dense_rdn.diffcore.tensor import as_tensor
from dense_rdn.reactor import D_MAX, D_MIN, ReactorParams, SimulationError, sample_flow_noise, step

CONDITIONS = ("optimized", "random-X0", "initial-theta", "random-theta")
METRICS = ("pearson", "sigma")


def worker_count() -> int:
    """Thread count for replicate evaluation, from ``DENSE_RDN_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("DENSE_RDN_THREADS", "1")))
    except ValueError:
        return 1


# ------------------------------------------------------------------ series


@dataclass
class MetricSeries:
    times: np.ndarray
    values: np.ndarray  # [replicates, times]; NaN after a simulation failure
    name: str = "metric"

    @property
    def mean(self) -> np.ndarray:
        return _nan_stat(np.nanmean, self.values)

    @property
    def std(self) -> np.ndarray:
        return _nan_stat(np.nanstd, self.values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mean", "std"] + [f"rep{i}" for i in range(self.n)])
            for j, t in enumerate(self.times):
                row = [repr(float(t)), repr(float(self.mean[j])), repr(float(self.std[j]))]
                w.writerow(row + [repr(float(v)) for v in self.values[:, j]])
        return path


def _nan_stat(fn, values: np.ndarray) -> np.ndarray:
    out = np.full(values.shape[1], np.nan)
    ok = np.any(np.isfinite(values), axis=0)
    if np.any(ok):
        out[ok] = fn(values[:, ok], axis=0)
    return out


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(da / na, db / nb))


def _state_array(x) -> np.ndarray:
    return as_tensor(x).value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def pearson_vs_time(traj, target, species_i: int = 0, batch_index: int = 0) -> MetricSeries:
    """Pearson r between species ``i`` and the target for every recorded state."""
    states = traj.states if hasattr(traj, "states") else traj
    times = np.asarray(getattr(traj, "state_times", range(len(states))), dtype=np.float64) * getattr(traj, "dt", 1.0)
    vals = [pearson(_state_array(x)[batch_index, species_i], target) for x in states]
    return MetricSeries(times, np.array([vals]), "pearson")


def sigma_dif_series(states: Sequence, params: ReactorParams, k_B: float = 1.0) -> np.ndarray:
    """Mean diffusive entropy production per state (cells and batch averaged)."""
    d = Tensor(as_tensor(params.D).value)
    return np.array([_finite_or_nan(lambda x: thermo.sigma_dif(Tensor(_state_array(x)), d, params.h, k_B), x)
                     for x in states])


def sigma_rxn_series(states: Sequence, params: ReactorParams, k_B: float = 1.0) -> np.ndarray:
    k = Tensor(params.rate_vector().value)
    return np.array([_finite_or_nan(lambda x: thermo.sigma_rxn(Tensor(_state_array(x)), params.crn, k, k_B), x)
                     for x in states])


def _finite_or_nan(rate, x) -> float:
    # states from a run that is blowing up can overflow the rate formulas; record those as missing
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            v = float(rate(x).value.mean())
    except (NonFiniteError, FloatingPointError):
        return float("nan")
    return v if np.isfinite(v) else float("nan")


# ------------------------------------------------------------------ forward-only simulation


def detached(params: ReactorParams) -> ReactorParams:
    return params.with_tensors([Tensor(t.value) for t in params.tensors()])


@dataclass
class Simulation:
    states: list[np.ndarray]
    times: np.ndarray
    failed_at: int | None = None
    clamp_events: int = 0


def simulate(
    x0,
    params: ReactorParams,
    T: int,
    noises: Sequence[np.ndarray | None] | None = None,
    dt_divisor: int = 1,
    rng: np.random.Generator | None = None,
) -> Simulation:
    """Value-only rollout keeping states on the coarse grid ``t = 0, dt, ..., T dt``.

    With ``dt_divisor = m`` each coarse step is split into ``m`` steps of
    ``dt / m``; a coarse-step noise field is held fixed over its substeps.
    A blow-up ends the run early and is reported via ``failed_at`` instead of
    raising, so ablations can keep their other replicates.
    """
    if dt_divisor < 1:
        raise ValueError("dt_divisor must be >= 1")
    p = detached(replace(params, dt=params.dt / dt_divisor))
    if noises is None:
        if params.noise_amplitude > 0:
            if rng is None:
                raise ValueError("a random generator is required when flow noise is enabled")
            b, _, u, v = np.shape(_state_array(x0))
            noises = [sample_flow_noise(rng, (b, 1, u, v), params.noise_amplitude, params.noise_sigma) for _ in range(T)]
        else:
            noises = [None] * T
    k = p.rate_vector()
    x = Tensor(_state_array(x0))
    states, clamped = [x.value], 0
    for t in range(T):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for _ in range(dt_divisor):
                    x, _, n = step(x, p, noises[t], k)
                    clamped += n
        except (NonFiniteError, SimulationError, FloatingPointError):
            return Simulation(states, np.arange(len(states)) * params.dt, t, clamped)
        states.append(x.value)
    return Simulation(states, np.arange(T + 1) * params.dt, None, clamped)


# ------------------------------------------------------------------ ablations


@dataclass(frozen=True)
class AblationCondition:
    kind: str
    n: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CONDITIONS:
            raise ValueError(f"unknown ablation condition {self.kind!r}; choose from {CONDITIONS}")
        if self.n < 1:
            raise ValueError("replicate count must be at least 1")


def truncated_normal(rng: np.random.Generator, mean, std, shape, lo=-np.inf, hi=np.inf, max_rounds: int = 1000):
    """Normal draws restricted to ``[lo, hi]`` by resampling out-of-range entries."""
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), shape)
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), shape)
    out = rng.normal(mean, std)
    for _ in range(max_rounds):
        bad = (out < lo) | (out > hi)
        if not np.any(bad):
            return out
        out[bad] = rng.normal(mean[bad], std[bad])
    return np.clip(out, lo, hi)


def random_x0(rng: np.random.Generator, x0: np.ndarray) -> np.ndarray:
    """Per-species normal noise with the mean and variance of ``x0`` (over batch and cells), truncated at 0."""
    mean = x0.mean(axis=(0, 2, 3), keepdims=True)
    std = x0.std(axis=(0, 2, 3), keepdims=True)
    return truncated_normal(rng, mean, std, x0.shape, lo=0.0)


def random_kinetics(rng: np.random.Generator, params: ReactorParams) -> ReactorParams:
    """Kinetic parameters replaced by matched truncated normal noise.

    Rates (forward and reverse pooled) and feed concentrations stay
    non-negative; D stays within the admissible diffusion range. The flow rate
    is a single value, so a mean- and variance-matched draw leaves it as is.
    """
    k = params.rate_vector().value
    r = params.crn.n_reversible
    new_k = truncated_normal(rng, k.mean(), k.std(), k.shape, lo=0.0)
    d = as_tensor(params.D).value
    new_d = truncated_normal(rng, d.mean(), max(d.std(), 1e-12), d.shape, lo=D_MIN, hi=D_MAX)
    feed = as_tensor(params.feed).value
    new_feed = truncated_normal(rng, feed.mean(), feed.std(), feed.shape, lo=0.0)
    return replace(params, k_f=new_k[:r], k_r=new_k[r:], D=new_d, feed=new_feed)


def replicate_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def run_ablation(
    experiment,
    theta: Mapping[str, np.ndarray],
    condition: AblationCondition,
    metric: str = "pearson",
    T: int | None = None,
    dt_divisor: int = 1,
    species_i: int | None = None,
) -> MetricSeries:
    """Roll out ``condition.n`` replicates and record ``metric`` at every coarse time point.

    Each replicate draws its own z, flow noise and replacement parameters from
    a sub-seed of ``condition.seed``.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    if metric == "pearson" and experiment.target is None:
        raise ValueError("the pearson metric needs a target image, none configured")
    T = experiment.T if T is None else T
    species_i = experiment.loss_config.target_species if species_i is None else species_i
    theta = {k: np.asarray(v, dtype=np.float64) for k, v in theta.items()}
    optimized = detached(experiment.reactor_params(theta))
    if condition.kind == "initial-theta":
        init = experiment.init_kinetics()
        base = detached(replace(optimized, k_f=init.k_f, k_r=init.k_r, D=init.D, f=init.f, feed=init.feed))
    else:
        base = optimized

    def one(seq: np.random.SeedSequence) -> np.ndarray:
        rng = np.random.default_rng(seq)
        z = experiment.sample_z(rng, 1)
        x0 = experiment.initial_state(theta, z).value
        params = base
        if condition.kind == "random-X0":
            x0 = random_x0(rng, x0)
        elif condition.kind == "random-theta":
            params = detached(random_kinetics(rng, optimized))
        sim = simulate(x0, params, T, dt_divisor=dt_divisor, rng=rng)
        if metric == "pearson":
            vals = np.array([pearson(s[0, species_i], experiment.target) for s in sim.states])
        else:
            vals = sigma_dif_series(sim.states, params)
        out = np.full(T + 1, np.nan)
        out[: len(vals)] = vals
        return out

    seeds = replicate_seeds(condition.seed, condition.n)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, seeds))
    else:
        rows = [one(s) for s in seeds]
    times = np.arange(T + 1) * experiment.reactor_template().dt
    return MetricSeries(times, np.array(rows), metric)


def ordering_fraction(optimized: MetricSeries, other: MetricSeries, skip_initial: bool = True) -> float:
    """Fraction of time points where the optimized mean exceeds the other condition's mean."""
    a, b = optimized.mean, other.mean
    sl = slice(1, None) if skip_initial else slice(None)
    a, b = a[sl], b[sl]
    # a failed (NaN) comparison condition counts as exceeded; a failed optimized one does not
    wins = np.where(np.isnan(b), np.isfinite(a), a > b)
    return float(np.mean(wins))


# ------------------------------------------------------------------ time-step refinement


@dataclass
class RefinementReport:
    factor: int
    final_state_change: float
    metric_change: float  # relative change of the trajectory-mean metric
    max_metric_deviation: float
    coarse_mean: float
    fine_mean: float
    failed: bool = False

    def as_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def timestep_refinement(
    x0,
    params: ReactorParams,
    T: int,
    metric: Callable[[Sequence[np.ndarray]], np.ndarray],
    factors: Sequence[int] = (10, 100),
    noises=None,
    rng: np.random.Generator | None = None,
) -> list[RefinementReport]:
    """Compare a ``dt`` rollout with ``dt/m`` rollouts on the coarse time grid.

    ``metric`` maps a state list to a per-state series; the trajectory mean of
    that series is what the relative change refers to.
    """
    if noises is None and params.noise_amplitude > 0:
        b, _, u, v = np.shape(_state_array(x0))
        noises = [sample_flow_noise(rng, (b, 1, u, v), params.noise_amplitude, params.noise_sigma) for _ in range(T)]
    coarse = simulate(x0, params, T, noises)
    if coarse.failed_at is not None:
        raise SimulationError("coarse rollout failed", step=coarse.failed_at)
    cm = metric(coarse.states)
    reports = []
    for m in factors:
        fine = simulate(x0, params, T, noises, dt_divisor=int(m))
        if fine.failed_at is not None:
            reports.append(RefinementReport(int(m), np.inf, np.inf, np.inf, float(cm.mean()), np.nan, True))
            continue
        fm = metric(fine.states)
        xc, xf = coarse.states[-1], fine.states[-1]
        scale = np.linalg.norm(xc)
        fsc = float(np.linalg.norm(xf - xc) / scale) if scale > 0 else float(np.linalg.norm(xf - xc))
        denom = abs(cm.mean())
        mc = float(abs(fm.mean() - cm.mean()) / denom) if denom > 0 else float(abs(fm.mean() - cm.mean()))
        reports.append(RefinementReport(int(m), fsc, mc, float(np.max(np.abs(fm - cm))), float(cm.mean()), float(fm.mean())))
    return reports


# ------------------------------------------------------------------ rendering


@dataclass
class Render:
    rgb: np.ndarray  # [U, V, 3] uint8
    explained_variance: float
    degenerate: bool
    components: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def _minmax(channel: np.ndarray) -> np.ndarray:
    lo, hi = channel.min(), channel.max()
    if hi - lo <= 0:
        return np.zeros_like(channel)
    return (channel - lo) / (hi - lo)


def pca_render(x) -> Render:
    """Map a [S, U, V] field to RGB.

    More than three species: per-cell vectors are projected onto the top three
    principal components over cells (computed for this frame alone), each
    channel min-max scaled. Three or fewer: species map to channels directly.
    A zero-variance field renders black and is flagged degenerate.
    """
    x = _state_array(x)
    if x.ndim == 4:
        x = x[0]
    s, u, v = x.shape
    cells = x.reshape(s, -1).T
    total = float(cells.var(axis=0).sum())
    meta = {"per_frame_pca": s > 3}
    if total <= 0:
        return Render(np.zeros((u, v, 3), np.uint8), 0.0, True, None, meta)
    if s <= 3:
        chans = [_minmax(x[i]) for i in range(s)] + [np.zeros((u, v))] * (3 - s)
        rgb = np.stack(chans, axis=-1)
        return Render((rgb * 255).round().astype(np.uint8), 1.0, False, None, meta)
    centered = cells - cells.mean(axis=0)
    cov = centered.T @ centered / cells.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    comps = evecs[:, :3].copy()
    for j in range(3):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] *= -1
    proj = centered @ comps
    rgb = np.stack([_minmax(proj[:, j]).reshape(u, v) for j in range(3)], axis=-1)
    explained = float(evals[:3].sum() / evals.sum())
    return Render((rgb * 255).round().astype(np.uint8), explained, False, comps.T, meta)


def save_png(rgb: np.ndarray, path, scale: int = 1) -> Path:
    from PIL import Image

    img = Image.fromarray(np.asarray(rgb, dtype=np.uint8))
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    img.save(path)
    return path


def render_frames(states: Sequence, directory, prefix: str = "frame", every: int = 1, scale: int = 4) -> list[dict]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = []
    for t in range(0, len(states), every):
        r = pca_render(states[t])
        path = save_png(r.rgb, directory / f"{prefix}_{t:05d}.png", scale)
        meta.append({"t": t, "file": path.name, "explained_variance": r.explained_variance,
                     "degenerate": r.degenerate, **r.meta})
    return meta


# ------------------------------------------------------------------ CRN graph


def crn_graph_edges(crn: CrnSpec, k_f, k_r, threshold: float = 1e-6) -> list[tuple[int, int, float, int]]:
    """``(source, target, rate, directed reaction)`` from net consumers to net producers.

    Directed reactions with rate below ``threshold`` are pruned.
    """
    k = np.concatenate([np.asarray(k_f, dtype=np.float64), np.asarray(k_r, dtype=np.float64)])
    edges = []
    for j in range(crn.n_directed):
        if k[j] < threshold:
            continue
        net = crn.net[j]
        for a in np.flatnonzero(net < 0):
            for b in np.flatnonzero(net > 0):
                edges.append((int(a), int(b), float(k[j]), j))
    return edges


def export_crn_graph(crn: CrnSpec, path, k_f, k_r, threshold: float = 1e-6) -> Path:
    """Graphviz DOT file: species nodes, one edge per (reaction, consumed, produced) with rate weight."""
    names = crn.species_names
    edges = crn_graph_edges(crn, k_f, k_r, threshold)
    kmax = max((e[2] for e in edges), default=1.0)
    lines = ["digraph crn {", "  rankdir=LR;", "  node [shape=circle];"]
    lines += [f'  "{n}";' for n in names]
    for a, b, rate, j in edges:
        w = rate / kmax if kmax > 0 else 0.0
        width = 0.5 + 4.5 * w
        gray = int(round(200 * (1.0 - w)))
        color = f"#{gray:02x}{gray:02x}{gray:02x}"
        lines.append(
            f'  "{names[a]}" -> "{names[b]}" [weight={rate!r}, penwidth={width:.3f}, color="{color}", '
            f'label="r{j}", tooltip="k={rate!r}"];'
        )
    lines.append("}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
