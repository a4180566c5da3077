"""Self-check suites: op gradients, conservation, equilibrium, entropy sign.

Each suite returns a list of :class:`Check` rows so the CLI and the test
suite can share them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from dense_rdn import crn as crn_mod
from dense_rdn import thermo
from dense_rdn.crn import build_dense_crn
from dense_rdn.diffcore import OPS, Tensor, directional_check, grad_check, ops, packed
from dense_rdn.losses import PRESETS
from dense_rdn.reactor import D_MAX, D_MIN, ReactorParams, diffusion_delta, gaussian_kernel, laplacian_kernel, rollout

GRAD_TOL = 1e-4


@dataclass
class Check:
    suite: str
    name: str
    value: float
    limit: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}/{self.name}: {self.value:.3e} (limit {self.limit:.1e})"


# ------------------------------------------------------------------ per-op cases

OpCase = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


def _away_from(rng, shape, kinks, margin=0.05, lo=-1.0, hi=1.0):
    v = rng.uniform(lo, hi, shape)
    for k in kinks:
        close = np.abs(v - k) < margin
        v[close] = k + np.where(v[close] >= k, margin, -margin) * 2
    return v


def _case(build):
    def make(rng):
        fn, arrays = build(rng)
        wrng = np.random.default_rng(int(rng.integers(1 << 31)))
        probe = None

        def scalar(*ts):
            nonlocal probe
            out = fn(*ts)
            if probe is None:
                probe = wrng.normal(size=out.shape)
            return (out * probe).sum()

        return scalar, arrays

    return make


TABLE = build_dense_crn(3).table


def _bce_case(rng):
    bits = (rng.random((3, 4)) > 0.5).astype(float)
    return (lambda x: ops.bce_with_logits(x, bits)), [rng.normal(size=(3, 4))]


OP_CASES: dict[str, OpCase] = {
    "add": _case(lambda r: (ops.add, [r.normal(size=(3, 4)), r.normal(size=(4,))])),
    "sub": _case(lambda r: (ops.sub, [r.normal(size=(3, 4)), r.normal(size=(3, 1))])),
    "mul": _case(lambda r: (ops.mul, [r.normal(size=(2, 3)), r.normal(size=(2, 3))])),
    "div": _case(lambda r: (ops.div, [r.normal(size=(2, 3)), r.uniform(0.5, 2.0, (2, 3))])),
    "neg": _case(lambda r: (ops.neg, [r.normal(size=(5,))])),
    "pow_int": _case(lambda r: (lambda x: ops.pow_int(x, 3), [r.normal(size=(4,))])),
    "exp": _case(lambda r: (ops.exp, [r.normal(size=(3, 3))])),
    "log": _case(lambda r: (ops.log, [r.uniform(0.2, 3.0, (3, 3))])),
    "tanh": _case(lambda r: (ops.tanh, [r.normal(size=(6,))])),
    "sigmoid": _case(lambda r: (ops.sigmoid, [r.normal(size=(6,))])),
    "sqrt": _case(lambda r: (ops.sqrt, [r.uniform(0.2, 3.0, (6,))])),
    "abs": _case(lambda r: (ops.abs_, [_away_from(r, (8,), [0.0])])),
    "clamp": _case(lambda r: (lambda x: ops.clamp(x, -0.5, 0.5), [_away_from(r, (10,), [-0.5, 0.5])])),
    "maximum": _case(lambda r: (lambda x: ops.maximum(x, 0.1), [_away_from(r, (10,), [0.1])])),
    "matmul": _case(lambda r: (ops.matmul, [r.normal(size=(2, 3)), r.normal(size=(3, 4))])),
    "channel_mix": _case(lambda r: (ops.channel_mix, [r.normal(size=(2, 3, 4, 4)), r.normal(size=(3, 2))])),
    "conv2d_periodic": _case(lambda r: (lambda x: ops.conv2d_periodic(x, laplacian_kernel(0.5)), [r.normal(size=(1, 2, 5, 6))])),
    "conv_transpose2d": _case(lambda r: (ops.conv_transpose2d, [r.normal(size=(2, 3, 2, 3)), r.normal(size=(3, 2, 4, 4))])),
    "conv2d_stride2": _case(lambda r: (ops.conv2d_stride2, [r.normal(size=(2, 2, 4, 6)), r.normal(size=(2, 3, 4, 4))])),
    "batch_norm": _case(lambda r: (ops.batch_norm, [r.normal(size=(2, 3, 3, 3))])),
    "sum": _case(lambda r: (lambda x: ops.reduce_sum(x, axis=(0, 2)), [r.normal(size=(2, 3, 4))])),
    "mean": _case(lambda r: (lambda x: ops.reduce_mean(x, axis=1, keepdims=True), [r.normal(size=(2, 3, 4))])),
    "var": _case(lambda r: (lambda x: ops.reduce_var(x, axis=(1, 2)), [r.normal(size=(2, 3, 4))])),
    "roll": _case(lambda r: (lambda x: ops.roll(x, 2, axis=1), [r.normal(size=(3, 5))])),
    "slice": _case(lambda r: (lambda x: ops.getitem(x, (slice(None), slice(1, 4))), [r.normal(size=(3, 5))])),
    "concat": _case(lambda r: (lambda a, b: ops.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))])),
    "stack": _case(lambda r: (lambda a, b: ops.stack([a, b], axis=0), [r.normal(size=(2, 3)), r.normal(size=(2, 3))])),
    "reshape": _case(lambda r: (lambda x: ops.reshape(x, (3, 4)), [r.normal(size=(2, 6))])),
    "scale_shift": _case(lambda r: (ops.scale_shift, [r.normal(size=(2, 3, 4)), r.normal(size=(3,)), r.normal(size=(3,))])),
    "mass_action": _case(lambda r: (lambda x, k: ops.mass_action(x, k, TABLE), [r.uniform(0.1, 2.0, (2, 3, 3, 3)), r.uniform(0.1, 1.0, (TABLE.shape[0],))])),
    "bce_with_logits": _case(lambda r: _bce_case(r)),
    "checkpoint": _case(lambda r: (lambda a, b: ops.checkpoint(lambda u, v: ops.tanh(u * v) + ops.exp(u), a, b), [r.normal(size=(3,)), r.normal(size=(3,))])),
}


def op_gradient_error(name: str, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    fn, arrays = OP_CASES[name](rng)
    wrapped, point = packed(fn, arrays)
    return grad_check(wrapped, point)


def check_ops(names=None, repeats: int = 1, tol: float = GRAD_TOL) -> list[Check]:
    names = list(OPS) if names is None else list(names)
    missing = [n for n in names if n not in OP_CASES]
    if missing:
        raise KeyError(f"no gradient case for ops {missing}")
    rows = []
    for n in names:
        err = max(op_gradient_error(n, s) for s in range(repeats))
        rows.append(Check("gradients", n, err, tol, err < tol))
    return rows


# ------------------------------------------------------------------ loss pipelines

# small instances (3 species, 8x8, T <= 8) of every loss preset; the segment variant
# exercises recomputation through ops.checkpoint
PIPELINE_VARIANTS: dict[str, dict] = {name: {} for name in PRESETS}
PIPELINE_VARIANTS["replication-segments"] = {"preset": "replication", "model": {"recompute_segments": 2}}


def pipeline_config(name: str, T: int = 6) -> dict:
    from dense_rdn import config

    variant = PIPELINE_VARIANTS[name]
    preset = variant.get("preset", name)
    raw = {
        "schema_version": 1,
        "seed": 3,
        "model": {"n_species": 3, "grid": [8, 8], "T": T, **variant.get("model", {})},
        "generator": {"n_bits": 4, "base_width": 8, "min_width": 4},
        "loss": {"preset": preset},
        "optimizer": {"max_iterations": 1},
    }
    lc = PRESETS[preset]
    if lc.target_weight > 0:
        raw["loss"]["target"] = {"builtin": "square"}
    if lc.z_weight > 0:
        raw["encoder"] = {"n_blocks": 2, "base_width": 4, "max_width": 8}
        raw["model"]["noise_amplitude"] = 0.8
        raw["optimizer"]["batch_size"] = 2
    return config.resolve(raw)


def pipeline_gradient_error(name: str, T: int = 6, seed: int = 0) -> float:
    """Directional finite-difference error of the full loss w.r.t. every parameter group."""
    from dense_rdn.experiment import Experiment

    ex = Experiment(pipeline_config(name, T))
    theta0 = ex.init_theta()
    names = sorted(theta0)

    def loss(*parts):
        theta = dict(zip(names, parts))
        return ex.evaluate(theta, np.random.default_rng(seed)).loss.total

    fn, point = packed(loss, [theta0[k] for k in names])
    rng = np.random.default_rng(seed)
    sizes = np.cumsum([0] + [theta0[k].size for k in names])
    groups: dict[str, np.ndarray] = {}
    for k, lo, hi in zip(names, sizes[:-1], sizes[1:]):
        g = k.split(".")[0]
        mask = groups.setdefault(g, np.zeros(point.size, dtype=bool))
        mask[lo:hi] = True
    directions = [rng.normal(size=point.size)]
    directions += [np.where(m, rng.normal(size=point.size), 0.0) for m in groups.values()]
    return directional_check(fn, point, directions)


def check_pipelines(names=None, tol: float = GRAD_TOL) -> list[Check]:
    rows = []
    for n in names or PIPELINE_VARIANTS:
        err = pipeline_gradient_error(n)
        rows.append(Check("pipelines", n, err, tol, err < tol))
    return rows


# ------------------------------------------------------------------ physics suites


def _params(crn, rng, f=0.0, d=None, feed=None):
    r, n = crn.n_reversible, crn.n_species
    d = rng.uniform(D_MIN, D_MAX, n) if d is None else d
    feed = np.zeros(n) if feed is None else feed
    return ReactorParams(crn, rng.uniform(0.0, 0.02, r), rng.uniform(0.0, 0.02, r), d, np.array(f), feed,
                         check_bounds=False)


def check_conservation(n_species: int = 5, grid=(32, 32), T: int = 100, seed: int = 0) -> list[Check]:
    """Closed reactor (f = 0): reactions + diffusion conserve total moles; diffusion alone conserves each species."""
    rng = np.random.default_rng(seed)
    crn = build_dense_crn(n_species)
    # mass conservation of every prototype holds only for equal stoichiometric totals (2 -> 2, 1 -> 1, 3 -> 3)
    x0 = rng.uniform(0.5, 1.5, (1, n_species, *grid))
    p = _params(crn, rng)
    traj = rollout(x0, p, T)
    m0 = x0.sum()
    total_drift = abs(traj.final.value.sum() - m0) / m0
    d = rng.uniform(D_MIN, D_MAX, n_species)
    x = Tensor(x0)
    for _ in range(T):
        x = x + diffusion_delta(x, d, 0.01)
    per = np.abs(x.value.sum(axis=(0, 2, 3)) - x0.sum(axis=(0, 2, 3))) / x0.sum(axis=(0, 2, 3))
    return [
        Check("conservation", "total_moles", float(total_drift), 1e-9, total_drift < 1e-9),
        Check("conservation", "per_species_diffusion", float(per.max()), 1e-10, per.max() < 1e-10),
    ]


def check_equilibrium(n_species: int = 4, grid=(8, 8), seed: int = 0) -> list[Check]:
    """Symmetric rates with uniform, equal concentrations at the feed: no reaction drive, no reaction entropy."""
    rng = np.random.default_rng(seed)
    crn = build_dense_crn(n_species)
    k = rng.uniform(0.1, 1.0, crn.n_reversible)
    c = 0.7
    feed = np.full(n_species, c)
    p = ReactorParams(crn, k, k.copy(), np.full(n_species, 1e-6), np.array(0.1), feed)
    x = np.full((1, n_species, *grid), c)
    dx = crn_mod.reaction_delta(x, crn, p.rate_vector()).value
    sig = thermo.sigma_rxn(x, crn, p.rate_vector()).value.mean()
    return [
        Check("equilibrium", "reaction_delta_inf", float(np.abs(dx).max()), 1e-12, np.abs(dx).max() < 1e-12),
        Check("equilibrium", "mean_sigma_rxn", float(abs(sig)), 1e-12, abs(sig) < 1e-12),
    ]


def fuzz_states(rng: np.random.Generator, n_species: int, grid, count: int) -> list[np.ndarray]:
    """Mixtures of smooth, rough, near-zero and sparse fields (stabilizer-active cells included)."""
    out = []
    for i in range(count):
        kind = i % 4
        shape = (1, n_species, *grid)
        if kind == 0:
            x = rng.uniform(0, 2, shape)
        elif kind == 1:
            x = rng.exponential(0.05, shape)
        elif kind == 2:
            x = np.where(rng.random(shape) < 0.7, 0.0, rng.uniform(0, 5, shape))
        else:
            base = rng.uniform(0, 1, shape)
            x = np.asarray(ops.conv2d_periodic(Tensor(base), gaussian_kernel(1.0)).value) * rng.uniform(0, 10)
        out.append(x)
    return out


def check_entropy_sign(count: int = 1000, n_species: int = 4, grid=(8, 8), seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    crn = build_dense_crn(n_species)
    worst_r, worst_d = np.inf, np.inf
    for x in fuzz_states(rng, n_species, grid, count):
        k = rng.exponential(0.5, crn.n_directed)
        d = rng.uniform(D_MIN, D_MAX, n_species)
        worst_r = min(worst_r, float(thermo.sigma_rxn(x, crn, k).value.min()))
        worst_d = min(worst_d, float(thermo.sigma_dif(x, d, 0.01).value.min()))
    return [
        Check("entropy", "min_sigma_rxn", worst_r, 0.0, worst_r >= 0.0),
        Check("entropy", "min_sigma_dif", worst_d, 0.0, worst_d >= 0.0),
    ]


SUITES = {
    "gradients": lambda quick: check_ops(repeats=1 if quick else 3),
    "pipelines": lambda quick: check_pipelines(),
    "conservation": lambda quick: check_conservation(T=20 if quick else 100),
    "equilibrium": lambda quick: check_equilibrium(),
    "entropy": lambda quick: check_entropy_sign(count=100 if quick else 1000),
}


def run_all(quick: bool = False, suites=None) -> list[Check]:
    rows: list[Check] = []
    for name in suites or SUITES:
        rows.extend(SUITES[name](quick))
    return rows
