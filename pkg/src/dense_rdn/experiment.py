"""An experiment binds network, generator, reactor settings and loss into an objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from dense_rdn import losses, optim
from dense_rdn.crn import build_dense_crn
from dense_rdn.diffcore import Tape, Tensor, backward
from dense_rdn.diffcore.tensor import as_tensor
from dense_rdn.genmodels import Encoder, Generator, sample_z
from dense_rdn.reactor import ReactorParams, Trajectory, rollout

KINETIC = ("k_f", "k_r", "D", "f", "feed")


def builtin_target(name: str, shape: tuple[int, int], c_max: float = 1.0) -> np.ndarray:
    """Simple binary images on a ``U x V`` grid with values in {0, c_max}."""
    u, v = shape
    r, c = np.meshgrid(np.arange(u) + 0.5, np.arange(v) + 0.5, indexing="ij")
    rr, cc = r / u - 0.5, c / v - 0.5
    if name == "square":
        img = (np.abs(rr) < 0.25) & (np.abs(cc) < 0.25)
    elif name == "disk":
        img = rr**2 + cc**2 < 0.3**2
    elif name == "ring":
        d = np.sqrt(rr**2 + cc**2)
        img = (d > 0.2) & (d < 0.35)
    elif name == "stripes":
        img = (np.floor(r / (u / 4)) % 2) == 0
    elif name == "checker":
        img = ((np.floor(r / (u / 2)) + np.floor(c / (v / 2))) % 2) == 0
    else:
        raise ValueError(f"unknown builtin target {name!r}")
    return img.astype(np.float64) * c_max


def load_png_target(path, shape: tuple[int, int], c_max: float = 1.0) -> np.ndarray:
    """8-bit grayscale PNG resized to the grid and rescaled to ``[0, c_max]``."""
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"target image {path} not found")
    with Image.open(path) as im:
        gray = im.convert("L")
        if gray.size != (shape[1], shape[0]):
            gray = gray.resize((shape[1], shape[0]), Image.BILINEAR)
        arr = np.asarray(gray, dtype=np.float64)
    return arr / 255.0 * c_max


def _generator_from(cfg: Mapping[str, Any], n_species: int, grid) -> Generator:
    g = dict(cfg)
    u, v = grid
    if "n_blocks" not in g:
        seed = g.get("seed_shape", [1, 1])
        n = math.log2(u / seed[0])
        if n != int(n) or seed[1] * 2 ** int(n) != v:
            raise ValueError(f"cannot infer generator depth for grid {grid}; set generator.n_blocks and seed_shape")
        g["n_blocks"] = int(n)
    if "seed_shape" in g:
        g["seed_shape"] = tuple(g["seed_shape"])
    return Generator(n_species=n_species, **g)


@dataclass
class Evaluation:
    loss: losses.LossResult
    trajectory: Trajectory
    z: np.ndarray
    params: ReactorParams


class Experiment:
    """Built from a resolved config (see :mod:`dense_rdn.config`)."""

    def __init__(self, cfg: Mapping[str, Any]):
        self.cfg = cfg
        m = cfg["model"]
        self.grid = tuple(m["grid"])
        self.T = int(m["T"])
        self.crn = build_dense_crn(m["n_species"], m["prototypes"])
        self.generator = _generator_from(cfg["generator"], m["n_species"], self.grid)
        enc = cfg.get("encoder")
        self.encoder = None if enc is None else Encoder(m["n_species"], n_bits=self.generator.n_bits, **enc)
        self.loss_config = losses.preset(cfg["loss"]["preset"], **cfg["loss"].get("overrides", {}))
        self.target = self._load_target(cfg["loss"].get("target"))
        o = dict(cfg["optimizer"])
        self.optimizer = optim.OptimizerConfig(seed=int(cfg.get("seed", 0)), **o)
        self.f_pinned = m.get("f_pinned")
        self.constraints = optim.kinetic_constraints(self.f_pinned is not None)

    # ------------------------------------------------------------ setup

    def _load_target(self, t) -> np.ndarray | None:
        if not t:
            return None
        c_max = float(t.get("c_max", 1.0))
        if "png" in t:
            return load_png_target(t["png"], self.grid, c_max)
        return builtin_target(t["builtin"], self.grid, c_max)

    def reactor_template(self) -> ReactorParams:
        m = self.cfg["model"]
        n, r = self.crn.n_species, self.crn.n_reversible
        return ReactorParams(
            self.crn, np.zeros(r), np.zeros(r), np.full(n, 1e-6), np.array(0.1), np.zeros(n),
            dt=float(m["dt"]), h=float(m["h"]), noise_amplitude=float(m["noise_amplitude"]),
            noise_sigma=float(m["noise_sigma"]), f_pinned=self.f_pinned is not None,
        )

    def init_rng(self) -> np.random.Generator:
        """Stream for parameter initialization, separate from the optimization stream."""
        return np.random.default_rng([int(self.cfg.get("seed", 0)), 1])

    def init_kinetics(self, rng: np.random.Generator | None = None) -> ReactorParams:
        m = self.cfg["model"]
        rng = rng if rng is not None else self.init_rng()
        f0 = self.f_pinned if self.f_pinned is not None else m["f_init"]
        p = optim.init_parameters(self.crn, rng, f0=f0, feed_convention=m["feed_convention"])
        t = self.reactor_template()
        return replace(t, k_f=p.k_f, k_r=p.k_r, D=p.D, f=p.f, feed=p.feed)

    def init_theta(self) -> dict[str, np.ndarray]:
        rng = self.init_rng()
        theta = optim.kinetic_theta(self.init_kinetics(rng))
        for k, v in self.generator.init_params(rng).items():
            theta[f"gen.{k}"] = v
        if self.encoder is not None:
            for k, v in self.encoder.init_params(rng, self.grid).items():
                theta[f"enc.{k}"] = v
        return theta

    # ------------------------------------------------------------ forward

    def reactor_params(self, theta: Mapping[str, Any]) -> ReactorParams:
        t = self.reactor_template()
        d = as_tensor(theta["D"]) * optim.D_UNIT
        f = theta["f"] if self.f_pinned is None else np.array(self.f_pinned)
        return replace(t, k_f=theta["k_f"], k_r=theta["k_r"], D=d, f=f, feed=theta["feed"])

    @staticmethod
    def _sub(theta: Mapping[str, Any], prefix: str) -> dict[str, Any]:
        n = len(prefix)
        return {k[n:]: v for k, v in theta.items() if k.startswith(prefix)}

    def initial_state(self, theta: Mapping[str, Any], z) -> Tensor:
        return self.generator(z, self._sub(theta, "gen."))

    def sample_z(self, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
        return sample_z(rng, self.generator.n_bits, batch or self.optimizer.batch_size)

    def rollout(self, theta, x0, T: int, rng, loss_config: losses.LossConfig | None = None) -> Trajectory:
        lc = loss_config or self.loss_config
        seg = self.cfg["model"].get("recompute_segments")
        params = self.reactor_params(theta)
        if seg:
            terms = []
            if lc.step_weight > 0:
                dmax = lc.delta_max
                terms.append(lambda x, dx: losses.step_excess(dx, dmax))
            return rollout(x0, params, T, rng, recompute_segments=seg, step_terms=terms)
        return rollout(x0, params, T, rng)

    def evaluate(self, theta, rng: np.random.Generator, T: int | None = None,
                 loss_config: losses.LossConfig | None = None) -> Evaluation:
        """One stochastic loss evaluation; draws z, flow noise and time samples from ``rng``."""
        T = self.T if T is None else T
        lc = loss_config or self.loss_config
        z = self.sample_z(rng)
        x0 = self.initial_state(theta, z)
        traj = self.rollout(theta, x0, T, rng, lc)
        params = self.reactor_params(theta)
        ctx = losses.LossContext(
            params, self.target, z, self.encoder, self._sub(theta, "enc.") if self.encoder is not None else None
        )
        return Evaluation(losses.compose_loss(lc, traj, ctx, rng), traj, z, params)

    def objective(self, T: int | None = None, loss_config: losses.LossConfig | None = None):
        def fn(params: Mapping[str, np.ndarray], rng: np.random.Generator):
            tape = Tape()
            theta = {k: tape.leaf(v) for k, v in params.items()}
            ev = self.evaluate(theta, rng, T, loss_config)
            grads = backward(ev.loss.total)
            return ev.loss.total.item(), {k: grads[theta[k]] for k in params}, ev.loss.terms

        return fn

    def run(self, output_dir=None, resume: bool = False, theta0=None, T: int | None = None,
            loss_config: losses.LossConfig | None = None, optimizer: optim.OptimizerConfig | None = None,
            callback=None) -> optim.OptimizationResult:
        theta0 = theta0 if theta0 is not None else self.init_theta()
        return optim.run_optimization(
            self.objective(T, loss_config), theta0, optimizer or self.optimizer, self.constraints,
            output_dir, resume, manifest_config=dict(self.cfg), callback=callback,
        )

    # ------------------------------------------------------------ inspection

    def values(self, theta: Mapping[str, Any]) -> dict[str, np.ndarray]:
        return {k: as_tensor(v).value for k, v in theta.items()}
