"""ADAM with global-norm clipping, box projection, schedules and checkpoints.

Parameters are handled as ``dict[str, ndarray]``. Names follow the
experiment layout: ``k_f``, ``k_r``, ``D`` (in units of 1e-5 m^2/s), ``f``,
``feed``, ``gen.*`` and ``enc.*``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from dense_rdn import __version__
from dense_rdn.crn import CrnSpec
from dense_rdn.reactor import D_MAX, D_MIN, F_MAX, F_MIN, ReactorParams

log = logging.getLogger(__name__)

D_UNIT = 1e-5
CHECKPOINT_FORMAT = 1


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.5
    decrease_at: tuple[int, ...] = ()
    lr_patience: int = 500
    es_patience: int = 1000
    max_iterations: int = 1000
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lr <= 0 or self.clip_norm <= 0 or self.eps <= 0:
            raise ValueError("learning rate, clip norm and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if self.lr_patience < 1 or self.es_patience < 1:
            raise ValueError("patience values must be at least 1")
        if self.max_iterations < 0 or self.batch_size < 1:
            raise ValueError("max_iterations must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "decrease_at", tuple(int(i) for i in self.decrease_at))


@dataclass(frozen=True)
class Constraints:
    """Closed boxes per parameter name; ``frozen`` names are never updated."""

    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    frozen: frozenset = frozenset()

    def project(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.bounds:
            lo, hi = self.bounds[name]
            return np.clip(value, lo, hi)
        return value

    def satisfied(self, params: Mapping[str, np.ndarray]) -> bool:
        for name, (lo, hi) in self.bounds.items():
            if name in params and (np.any(params[name] < lo) or np.any(params[name] > hi)):
                return False
        return True


def kinetic_constraints(f_pinned: bool = False) -> Constraints:
    return Constraints(
        bounds={
            "k_f": (0.0, np.inf),
            "k_r": (0.0, np.inf),
            "feed": (0.0, np.inf),
            "f": (F_MIN, F_MAX),
            "D": (D_MIN / D_UNIT, D_MAX / D_UNIT),
        },
        frozen=frozenset({"f"}) if f_pinned else frozenset(),
    )


# ------------------------------------------------------------------ initialization


def autocatalytic_indices(crn: CrnSpec) -> list[int]:
    """Forward-reaction index of ``X_{(i+1) mod N} + 2 X_i -> 3 X_i`` for each species i."""
    if "P3" not in crn.prototypes:
        raise ValueError("initialization needs the autocatalytic prototype P3")
    n = crn.n_species
    out = []
    for i in range(n):
        j, direction = crn.index(((i + 1) % n, i, i), (i, i, i))
        assert direction == "f"
        out.append(j)
    return out


def init_parameters(
    crn: CrnSpec,
    rng: np.random.Generator,
    f0: float = 0.1,
    feed_convention: str = "initialized",
    **reactor_kwargs: Any,
) -> ReactorParams:
    """Starting kinetics.

    One autocatalytic reaction per species gets forward rate 1; every other
    directed rate is ``1e-3 + Unif(-1e-4, 1e-4)``. Feed ``x_i = 4^-N_a(i)``
    where ``N_a(i)`` counts autocatalytic reactions producing species i:
    those set to rate 1 (``"initialized"``, giving 1/4) or all of them
    (``"all"``, giving ``4^-(N-1)``). ``D ~ Unif(0.05, 0.2) x 1e-5``.
    """
    auto = autocatalytic_indices(crn)
    r, n = crn.n_reversible, crn.n_species
    rates = 1e-3 + rng.uniform(-1e-4, 1e-4, size=2 * r)
    rates[auto] = 1.0
    if feed_convention == "initialized":
        n_auto = np.ones(n)
    elif feed_convention == "all":
        n_auto = np.full(n, float(n - 1))
    else:
        raise ValueError(f"unknown feed convention {feed_convention!r}")
    feed = 4.0 ** (-n_auto)
    d = rng.uniform(D_MIN, D_MAX, size=n)
    if not F_MIN <= f0 <= F_MAX:
        raise ValueError(f"initial flow rate {f0} outside [{F_MIN}, {F_MAX}]")
    return ReactorParams(crn, rates[:r], rates[r:], d, np.array(f0), feed, **reactor_kwargs)


def kinetic_theta(params: ReactorParams) -> dict[str, np.ndarray]:
    """Optimizer view of reactor parameters (D rescaled to 1e-5 m^2/s)."""
    k_f, k_r, d, f, feed = (t.value.copy() for t in params.tensors())
    return {"k_f": k_f, "k_r": k_r, "D": d / D_UNIT, "f": f.reshape(()), "feed": feed}


# ------------------------------------------------------------------ ADAM


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float
    iteration: int = 0
    adam_steps: int = 0
    best_loss: float = math.inf
    best_iteration: int = -1
    lr_wait: int = 0
    es_wait: int = 0
    history: list[dict[str, float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], lr: float) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            lr,
        )


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    # summed in sorted-name order: the result must not depend on dict insertion order,
    # which differs between a fresh run and one restored from a checkpoint
    norm = math.sqrt(sum(float(np.sum(np.square(grads[k]))) for k in sorted(grads)))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: OptimizerConfig,
    constraints: Constraints | None = None,
) -> dict[str, np.ndarray]:
    """Bias-corrected ADAM update followed by projection onto the constraint boxes."""
    constraints = constraints or Constraints()
    state.adam_steps += 1
    t = state.adam_steps
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None or name in constraints.frozen:
            out[name] = p
            continue
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        out[name] = constraints.project(name, p - update)
    return out


CONTINUE, HALVE, STOP = "continue", "halve-lr", "stop"


def schedule_step(state: OptimizerState, config: OptimizerConfig, loss: float) -> str:
    """Track the best loss and decide the learning-rate / stopping action.

    ``state.iteration`` is the index of the iteration that produced ``loss``.
    The fixed schedule halves once the following iteration reaches a listed
    index; patience counters behave like the common plateau and early-stop
    callbacks (strict improvement of the best loss resets them).
    """
    if loss < state.best_loss:
        state.best_loss = loss
        state.best_iteration = state.iteration
        state.lr_wait = 0
        state.es_wait = 0
    else:
        state.lr_wait += 1
        state.es_wait += 1
    nxt = state.iteration + 1
    # the learning-rate bookkeeping runs even on the last iteration so that a run
    # extended later (larger max_iterations, resume) matches an uninterrupted one
    action = CONTINUE
    if nxt in config.decrease_at:
        action = HALVE
    if state.lr_wait >= config.lr_patience:
        state.lr_wait = 0
        action = HALVE
    if action == HALVE:
        state.lr *= 0.5
    if state.es_wait >= config.es_patience or nxt >= config.max_iterations:
        return STOP
    return action


# ------------------------------------------------------------------ checkpoints


def _write_blob(path: Path, arrays: Mapping[str, np.ndarray], names: list[str]) -> None:
    with path.open("wb") as fh:
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def _read_blob(path: Path, layout: list[tuple[str, list[int]]]) -> dict[str, np.ndarray]:
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    out, pos = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape)) if shape else 1
        out[name] = raw[pos:pos + size].reshape(shape).astype(np.float64)
        pos += size
    if pos != raw.size:
        raise ValueError(f"{path}: blob holds {raw.size} values, manifest describes {pos}")
    return out


HISTORY_FIXED = ("iteration", "loss")


def history_columns(history: list[dict[str, float]]) -> list[str]:
    terms: list[str] = []
    for row in history:
        for k in row:
            if k not in HISTORY_FIXED and k not in ("lr", "grad_norm") and k not in terms:
                terms.append(k)
    return list(HISTORY_FIXED) + terms + ["lr", "grad_norm"]


def history_csv(history: list[dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = history_columns(history)
    w.writerow(cols)
    for row in history:
        out = []
        for c in cols:
            v = row.get(c, "")
            out.append(str(int(v)) if c == "iteration" else ("" if v == "" else repr(float(v))))
        w.writerow(out)
    return buf.getvalue()


def read_history_csv(path) -> list[dict[str, float]]:
    rows = []
    with Path(path).open() as fh:
        for rec in csv.DictReader(fh):
            row: dict[str, float] = {}
            for k, v in rec.items():
                if v == "":
                    continue
                row[k] = int(v) if k == "iteration" else float(v)
            rows.append(row)
    return rows


def save_checkpoint(
    directory,
    params: Mapping[str, np.ndarray],
    state: OptimizerState,
    rng: np.random.Generator,
    config: Mapping[str, Any] | None = None,
    loss: float | None = None,
    extra: Mapping[str, Any] | None = None,
) -> Path:
    """Manifest JSON + little-endian float64 blobs for params and ADAM moments.

    Written to a temporary sibling first and renamed, so an interrupted write
    never clobbers the previous checkpoint.
    """
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    names = sorted(params)
    layout = [[n, list(np.shape(params[n]))] for n in names]
    _write_blob(tmp / "params.bin", params, names)
    _write_blob(tmp / "adam_m.bin", state.m, names)
    _write_blob(tmp / "adam_v.bin", state.v, names)
    (tmp / "history.csv").write_text(history_csv(state.history))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "code_version": __version__,
        "layout": layout,
        "iteration": state.iteration,
        "loss": loss,
        "optimizer_state": {
            "lr": state.lr,
            "adam_steps": state.adam_steps,
            "best_loss": state.best_loss if math.isfinite(state.best_loss) else None,
            "best_iteration": state.best_iteration,
            "lr_wait": state.lr_wait,
            "es_wait": state.es_wait,
        },
        "rng_state": rng.bit_generator.state,
        "config": config,
        "extra": dict(extra or {}),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    return directory


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    state: OptimizerState
    rng: np.random.Generator
    manifest: dict[str, Any]

    @property
    def config(self) -> dict[str, Any] | None:
        return self.manifest.get("config")


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    layout = [(n, s) for n, s in manifest["layout"]]
    params = _read_blob(directory / "params.bin", layout)
    m = _read_blob(directory / "adam_m.bin", layout)
    v = _read_blob(directory / "adam_v.bin", layout)
    o = manifest["optimizer_state"]
    state = OptimizerState(
        m, v, o["lr"], manifest["iteration"], o["adam_steps"],
        o["best_loss"] if o["best_loss"] is not None else math.inf, o["best_iteration"], o["lr_wait"], o["es_wait"],
    )
    hist_path = directory / "history.csv"
    if hist_path.exists():
        state.history = read_history_csv(hist_path)
    bg = np.random.PCG64()
    bg.state = manifest["rng_state"]
    return Checkpoint(params, state, np.random.Generator(bg), manifest)


# ------------------------------------------------------------------ loops

Objective = Callable[[Mapping[str, np.ndarray], np.random.Generator], tuple[float, dict[str, np.ndarray], dict[str, float]]]


class OptimizationAborted(RuntimeError):
    """Raised on a non-finite loss or simulation failure; carries the last good result."""

    def __init__(self, message: str, result: "OptimizationResult"):
        super().__init__(message)
        self.result = result


@dataclass
class OptimizationResult:
    best_params: dict[str, np.ndarray]
    best_loss: float
    params: dict[str, np.ndarray]
    state: OptimizerState
    stop_reason: str
    output_dir: Path | None = None

    @property
    def history(self) -> list[dict[str, float]]:
        return self.state.history


def run_optimization(
    objective: Objective,
    params0: Mapping[str, np.ndarray],
    config: OptimizerConfig,
    constraints: Constraints | None = None,
    output_dir=None,
    resume: bool = False,
    manifest_config: Mapping[str, Any] | None = None,
    callback: Callable[[int, Mapping[str, np.ndarray], dict[str, float]], None] | None = None,
) -> OptimizationResult:
    """Minimize ``objective(params, rng) -> (loss, grads, term values)``.

    Each iteration evaluates, clips, steps and schedules. With ``output_dir``
    a ``best/`` checkpoint is written on every new best, ``latest/`` every
    ``checkpoint_every`` iterations and at the end, together with
    ``history.csv``. ``resume`` restarts from ``latest/`` and continues
    bit-identically.
    """
    constraints = constraints or Constraints()
    out = Path(output_dir) if output_dir is not None else None
    params = {k: np.array(params0[k], dtype=np.float64) for k in sorted(params0)}
    params = {k: constraints.project(k, v) for k, v in params.items()}
    rng = np.random.default_rng(config.seed)
    state = OptimizerState.fresh(params, config.lr)
    best_params = {k: v.copy() for k, v in params.items()}
    if resume:
        if out is None or not (out / "latest" / "manifest.json").exists():
            raise FileNotFoundError("resume requested but no latest/ checkpoint found")
        ck = load_checkpoint(out / "latest")
        params, state, rng = {k: ck.params[k] for k in sorted(ck.params)}, ck.state, ck.rng
        best_dir = out / "best"
        best_params = load_checkpoint(best_dir).params if best_dir.exists() else {k: v.copy() for k, v in params.items()}
        extra = ck.manifest.get("extra", {})
        if extra.get("finished") and (extra.get("stop_reason") == "early-stop" or state.iteration >= config.max_iterations):
            return OptimizationResult(best_params, state.best_loss, params, state, "resumed-finished", out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint(kind: str, loss: float | None, p, finished: bool = False) -> None:
        if out is not None:
            extra = {"finished": finished, "stop_reason": stop_reason if finished else None}
            save_checkpoint(out / kind, p, state, rng, manifest_config, loss, extra)

    stop_reason = "max-iterations"
    while state.iteration < config.max_iterations:
        try:
            loss, grads, terms = objective(params, rng)
        except Exception as exc:  # simulation blow-ups or non-finite values
            if out is not None:
                (out / "history.csv").write_text(history_csv(state.history))
            result = OptimizationResult(best_params, state.best_loss, params, state, "aborted", out)
            raise OptimizationAborted(f"iteration {state.iteration}: {exc}", result) from exc
        if not math.isfinite(loss):
            result = OptimizationResult(best_params, state.best_loss, params, state, "aborted", out)
            raise OptimizationAborted(f"iteration {state.iteration}: non-finite loss {loss}", result)
        grads = {k: g for k, g in grads.items() if k not in constraints.frozen}
        clipped, norm = clip_gradients(grads, config.clip_norm)
        row = {"iteration": state.iteration, "loss": loss, **terms, "lr": state.lr, "grad_norm": norm}
        state.history.append(row)
        improved = loss < state.best_loss
        evaluated = params
        params = adam_step(params, clipped, state, config, constraints)
        action = schedule_step(state, config, loss)
        if improved:
            best_params = {k: v.copy() for k, v in evaluated.items()}
            # moments and rng are those after this iteration; params are the evaluated ones
            checkpoint("best", loss, best_params)
        if callback is not None:
            callback(state.iteration, params, row)
        state.iteration += 1
        if action == STOP:
            stop_reason = "early-stop" if state.es_wait >= config.es_patience else "max-iterations"
            break
        if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            checkpoint("latest", loss, params)
    checkpoint("latest", state.history[-1]["loss"] if state.history else None, params, finished=True)
    if out is not None:
        (out / "history.csv").write_text(history_csv(state.history))
    log.info("optimization stopped (%s) after %d iterations, best %.6g", stop_reason, state.iteration, state.best_loss)
    return OptimizationResult(best_params, state.best_loss, params, state, stop_reason, out)


@dataclass(frozen=True)
class Stage:
    T: int
    optimizer: OptimizerConfig
    beta_star: float | None = None


def check_stages(stages: Iterable[Stage]) -> list[Stage]:
    stages = list(stages)
    if not stages:
        raise ValueError("no stages given")
    horizons = [s.T for s in stages]
    if any(b < a for a, b in zip(horizons, horizons[1:])):
        raise ValueError(f"stage horizons must be non-decreasing, got {horizons}")
    return stages


def run_incremental(
    make_objective: Callable[[Stage], Objective],
    params0: Mapping[str, np.ndarray],
    stages: Iterable[Stage],
    constraints: Constraints | None = None,
    output_dir=None,
    manifest_config: Callable[[Stage], Mapping[str, Any]] | None = None,
) -> list[OptimizationResult]:
    """Optimize stage by stage, each warm-started from the previous stage's best parameters."""
    stages = check_stages(stages)
    results = []
    params = dict(params0)
    for i, stage in enumerate(stages):
        out = None if output_dir is None else Path(output_dir) / f"stage{i + 1}"
        res = run_optimization(
            make_objective(stage), params, stage.optimizer, constraints, out,
            manifest_config=None if manifest_config is None else manifest_config(stage),
        )
        results.append(res)
        params = res.best_params
    return results


def config_dict(config: OptimizerConfig) -> dict[str, Any]:
    d = asdict(config)
    d["decrease_at"] = list(config.decrease_at)
    return d


def with_overrides(config: OptimizerConfig, **kw: Any) -> OptimizerConfig:
    return replace(config, **kw)
