"""Command line entry point: ``dense-rdn <verb> ...``.

Verbs: optimize, simulate, ablate, render, verify, gradcheck.

Exit status: 0 success, 1 a verification suite failed, 2 invalid configuration
or arguments, 3 a run aborted on a numerical blow-up (its last good
checkpoint is kept on disk).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from dense_rdn import __version__, analysis, artifacts, config, demos, optim, verify
from dense_rdn.crn import format_reactions

log = logging.getLogger("dense_rdn")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _config_source(arg: str) -> Path:
    """A config argument is a file path or the name of a shipped preset."""
    p = Path(arg)
    if p.exists():
        return p
    if arg in config.list_presets():
        return config.preset_path(arg)
    raise UsageError(f"no config file or preset named {arg!r} (presets: {', '.join(config.list_presets())})")


def _checkpoint_dir(path) -> Path:
    """Accept a checkpoint directory or a run directory (then ``best/`` is used)."""
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    if (p / "best" / "manifest.json").exists():
        return p / "best"
    raise UsageError(f"{p} is neither a checkpoint nor a run directory with best/")


def _load_checkpoint(path) -> optim.Checkpoint:
    return optim.load_checkpoint(_checkpoint_dir(path))


def _experiment_from_checkpoint(ck: optim.Checkpoint):
    from dense_rdn.experiment import Experiment

    cfg = ck.config
    if cfg is None:
        raise UsageError("checkpoint manifest carries no experiment config")
    return Experiment(cfg)


def _warm_start(theta0: Mapping[str, np.ndarray], source: Mapping[str, np.ndarray], origin: str) -> dict:
    theta = dict(theta0)
    missing = sorted(set(theta0) - set(source))
    if missing:
        raise config.ConfigError([f"{origin}: parameters {missing} missing from the warm-start checkpoint"])
    for k in theta0:
        if np.shape(source[k]) != np.shape(theta0[k]):
            raise config.ConfigError(
                [f"{origin}: parameter {k} has shape {np.shape(source[k])}, expected {np.shape(theta0[k])}"]
            )
        theta[k] = np.array(source[k], dtype=np.float64)
    return theta


def _montage(states: Sequence[np.ndarray], picks: Sequence[int]) -> np.ndarray:
    frames = [analysis.pca_render(states[i][0]).rgb for i in picks]
    gap = np.full((frames[0].shape[0], 2, 3), 255, dtype=np.uint8)
    row = []
    for f in frames:
        row += [f, gap]
    return np.concatenate(row[:-1], axis=1)


def _snapshot(ex, theta, out: Path, name: str, seed: int) -> analysis.Simulation:
    """Forward-simulate ``theta`` with a fixed stream and save a t=0, T/2, T montage."""
    rng = np.random.default_rng([seed, 2])
    x0 = ex.initial_state(theta, ex.sample_z(rng, 1)).value
    sim = analysis.simulate(x0, analysis.detached(ex.reactor_params(theta)), ex.T, rng=rng)
    last = len(sim.states) - 1
    out.mkdir(parents=True, exist_ok=True)
    analysis.save_png(_montage(sim.states, [0, last // 2, last]), out / f"{name}.png", scale=4)
    return sim


# ------------------------------------------------------------------ optimize


def cmd_optimize(args) -> int:
    from dense_rdn.experiment import Experiment

    sources = [_config_source(a) for a in args.configs]
    previous_best: dict[str, np.ndarray] | None = None
    for i, src in enumerate(sources):
        try:
            raw = json.loads(src.read_text())
        except json.JSONDecodeError as exc:
            raise config.ConfigError([f"{src}: not valid JSON ({exc})"]) from exc
        if args.target is not None:
            raw.setdefault("loss", {})["target"] = {"png": str(Path(args.target).resolve())}
        cfg = config.resolve(raw, base_dir=src.parent)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.max_iterations is not None:
            cfg["optimizer"]["max_iterations"] = args.max_iterations
        if args.output is not None:
            out = Path(args.output) if len(sources) == 1 else Path(args.output) / f"stage{i + 1}"
        else:
            out = Path(cfg["output_dir"])
        cfg["output_dir"] = str(out)
        ex = Experiment(cfg)
        out.mkdir(parents=True, exist_ok=True)
        config.dump(cfg, out / "config.json")
        artifacts.write_json(out / "run_info.json", artifacts.run_info(cfg["seed"], config=str(src)))

        theta0 = ex.init_theta()
        if cfg.get("init_from"):
            theta0 = _warm_start(theta0, _load_checkpoint(cfg["init_from"]).params, str(src))
        elif previous_best is not None:
            theta0 = _warm_start(theta0, previous_best, str(src))

        every = int(cfg.get("render_every") or 0)
        renders = out / "renders"

        def progress(it, params, row, ex=ex, every=every, renders=renders, seed=cfg["seed"]):
            if args.log_every and it % args.log_every == 0:
                log.info("iter %d loss %.6g lr %.3g |g| %.3g", it, row["loss"], row["lr"], row["grad_norm"])
            if every and it % every == 0:
                _snapshot(ex, params, renders, f"iter{it:06d}", seed)

        log.info("optimizing %s -> %s", src, out)
        try:
            result = ex.run(out, resume=args.resume, theta0=theta0, callback=progress)
        except optim.OptimizationAborted as exc:
            log.error("run aborted: %s (last good checkpoint in %s)", exc, out / "best")
            _final_artifacts(ex, exc.result.best_params, out, cfg["seed"])
            return EXIT_ABORTED
        log.info("%s: stopped (%s), best loss %.6g", src.name, result.stop_reason, result.best_loss)
        _final_artifacts(ex, result.best_params, out, cfg["seed"])
        previous_best = result.best_params
    return EXIT_OK


def _final_artifacts(ex, theta, out: Path, seed: int) -> None:
    final = out / "final"
    final.mkdir(parents=True, exist_ok=True)
    sim = _snapshot(ex, theta, final, "montage", seed)
    params = analysis.detached(ex.reactor_params(theta))
    artifacts.write_trajectory(
        final / "trajectory", sim.states, sim.times, params, ex.crn.species_names,
        meta=artifacts.run_info(seed, failed_at=sim.failed_at),
    )
    kin = optim.kinetic_theta(params)
    (final / "reactions.txt").write_text(format_reactions(ex.crn, kin["k_f"], kin["k_r"]) + "\n")
    analysis.export_crn_graph(ex.crn, final / "crn.dot", kin["k_f"], kin["k_r"])


# ------------------------------------------------------------------ simulate


def _parse_bits(text: str, n_bits: int) -> np.ndarray:
    if len(text) != n_bits or set(text) - {"0", "1"}:
        raise UsageError(f"--z must be {n_bits} characters of 0/1")
    return np.array([[float(c) for c in text]])


def cmd_simulate(args) -> int:
    rng = np.random.default_rng(args.seed)
    meta: dict[str, Any] = {"dt_divisor": args.dt_divisor}
    if args.preset is not None:
        if args.preset != "gray-scott":
            raise UsageError(f"unknown simulation preset {args.preset!r}")
        x0, params = demos.gray_scott_coupled(tuple(args.grid), seed=args.seed)
        T = args.T if args.T is not None else 1000
        species = list(demos.GRAY_SCOTT_SPECIES)
        meta["preset"] = "gray-scott"
    else:
        ck = _load_checkpoint(args.checkpoint)
        ex = _experiment_from_checkpoint(ck)
        theta = ck.params
        z = _parse_bits(args.z, ex.generator.n_bits) if args.z else ex.sample_z(rng, 1)
        x0 = ex.initial_state(theta, z).value
        params = analysis.detached(ex.reactor_params(theta))
        T = args.T if args.T is not None else ex.T
        species = ex.crn.species_names
        meta.update(checkpoint=str(_checkpoint_dir(args.checkpoint)), z=z.tolist())

    sim = analysis.simulate(x0, params, T, dt_divisor=args.dt_divisor, rng=rng)
    meta["n_steps"] = (len(sim.states) - 1) * args.dt_divisor
    meta["failed_at"] = sim.failed_at
    keep = slice(None, None, args.save_every)
    out = Path(args.output)
    artifacts.write_trajectory(out, sim.states[keep], sim.times[keep], params, species,
                               meta=artifacts.run_info(args.seed, **meta))
    if args.render_every:
        analysis.render_frames(sim.states, out / "frames", every=args.render_every)
    log.info("simulated %d coarse steps (%d Euler steps) -> %s", len(sim.states) - 1, meta["n_steps"], out)
    if sim.failed_at is not None:
        log.error("numerical blow-up at coarse step %d; states up to it were written", sim.failed_at)
        return EXIT_ABORTED
    return EXIT_OK


# ------------------------------------------------------------------ ablate


def _plot_series(series: Mapping[str, analysis.MetricSeries], path: Path, size=(480, 320)) -> Path:
    """Mean +- one standard deviation per condition as a PNG line plot."""
    from PIL import Image, ImageDraw

    colors = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40)]
    w, h = size
    pad = 30
    img = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(img)
    lo = min(float(np.nanmin(s.mean - s.std)) for s in series.values() if np.isfinite(s.mean).any())
    hi = max(float(np.nanmax(s.mean + s.std)) for s in series.values() if np.isfinite(s.mean).any())
    span = hi - lo or 1.0
    t_max = max(float(s.times[-1]) for s in series.values()) or 1.0

    def xy(t, v):
        return pad + (w - 2 * pad) * t / t_max, h - pad - (h - 2 * pad) * (v - lo) / span

    draw.rectangle([pad, pad, w - pad, h - pad], outline=(0, 0, 0))
    for (name, s), c in zip(series.items(), colors):
        faint = tuple(int(255 - 0.25 * (255 - v)) for v in c)
        for sign in (-1, 1):
            pts = [xy(t, m + sign * d) for t, m, d in zip(s.times, s.mean, s.std) if np.isfinite(m) and np.isfinite(d)]
            if len(pts) > 1:
                draw.line(pts, fill=faint)
        pts = [xy(t, m) for t, m in zip(s.times, s.mean) if np.isfinite(m)]
        if len(pts) > 1:
            draw.line(pts, fill=c, width=2)
        draw.text((pad + 4, pad + 4 + 12 * list(series).index(name)), name, fill=c)
    draw.text((pad, h - pad + 8), f"t: 0..{t_max:g}   range {lo:.3g}..{hi:.3g}", fill=(0, 0, 0))
    img.save(path)
    return path


def cmd_ablate(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    ex = _experiment_from_checkpoint(ck)
    conditions = list(analysis.CONDITIONS) if args.conditions == ["all"] else args.conditions
    for c in conditions:
        if c not in analysis.CONDITIONS:
            raise UsageError(f"unknown condition {c!r}; choose from {', '.join(analysis.CONDITIONS)}")
    if args.metric == "pearson" and ex.target is None:
        raise UsageError("the pearson metric needs a run with a target image; use --metric sigma")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    for c in conditions:
        s = analysis.run_ablation(ex, ck.params, analysis.AblationCondition(c, n=args.n, seed=args.seed),
                                  metric=args.metric, T=args.T, dt_divisor=args.dt_divisor)
        s.to_csv(out / f"{args.metric}_{c}.csv")
        series[c] = s
        log.info("%s: trajectory-mean %s %.6g", c, args.metric, float(np.nanmean(s.mean)))
    summary: dict[str, Any] = {
        "metric": args.metric,
        "n": args.n,
        "dt_divisor": args.dt_divisor,
        "means": {c: float(np.nanmean(s.mean)) if np.isfinite(s.mean).any() else None for c, s in series.items()},
    }
    if "optimized" in series:
        summary["ordering_fraction"] = {
            c: analysis.ordering_fraction(series["optimized"], s) for c, s in series.items() if c != "optimized"
        }
    summary.update(artifacts.run_info(args.seed, checkpoint=str(_checkpoint_dir(args.checkpoint))))
    artifacts.write_json(out / "summary.json", summary)
    _plot_series(series, out / f"{args.metric}.png")
    return EXIT_OK


# ------------------------------------------------------------------ render


def cmd_render(args) -> int:
    out = Path(args.output) if args.output else None
    if args.trajectory:
        states, sidecar = artifacts.read_trajectory(args.trajectory)
        target = out or Path(args.trajectory) / "frames"
        index = analysis.render_frames(list(states), target, every=args.every, scale=args.scale)
        artifacts.write_json(target / "frames.json", {"frames": index, "source": str(args.trajectory)})
        log.info("wrote %d frames to %s", len(index), target)
    if args.crn:
        ck = _load_checkpoint(args.crn)
        ex = _experiment_from_checkpoint(ck)
        params = ex.reactor_params(ck.params)
        kin = optim.kinetic_theta(params)
        target = out or _checkpoint_dir(args.crn)
        target.mkdir(parents=True, exist_ok=True)
        (target / "reactions.txt").write_text(format_reactions(ex.crn, kin["k_f"], kin["k_r"]) + "\n")
        analysis.export_crn_graph(ex.crn, target / "crn.dot", kin["k_f"], kin["k_r"], threshold=args.threshold)
        log.info("wrote reactions.txt and crn.dot to %s", target)
    if not args.trajectory and not args.crn:
        raise UsageError("render needs a trajectory directory and/or --crn CHECKPOINT")
    return EXIT_OK


# ------------------------------------------------------------------ verify / gradcheck


def _report(rows: Sequence[verify.Check]) -> int:
    for r in rows:
        print(r.line())
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_verify(args) -> int:
    suites = args.suite or None
    if suites:
        unknown = sorted(set(suites) - set(verify.SUITES))
        if unknown:
            raise UsageError(f"unknown suites {unknown}; choose from {sorted(verify.SUITES)}")
    return _report(verify.run_all(quick=args.quick, suites=suites))


def cmd_gradcheck(args) -> int:
    rows = []
    if args.op or not args.pipeline:
        rows += verify.check_ops(args.op or None, repeats=args.repeats, tol=args.tol)
    if args.pipeline or not args.op:
        rows += verify.check_pipelines(args.pipeline or None, tol=args.tol)
    return _report(rows)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dense-rdn", description="Differentiable dense reaction-diffusion networks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="verb", required=True)

    o = sub.add_parser("optimize", help="run one config, or several chained (each warm-starts from the last best)")
    o.add_argument("configs", nargs="+", help="config JSON paths or shipped preset names")
    o.add_argument("--output", help="output directory (stage<i>/ subdirectories when chaining)")
    o.add_argument("--resume", action="store_true", help="continue from <output>/latest")
    o.add_argument("--target", help="8-bit grayscale PNG target (replaces loss.target)")
    o.add_argument("--seed", type=int, help="override the config seed")
    o.add_argument("--max-iterations", type=int, help="override optimizer.max_iterations")
    o.add_argument("--log-every", type=int, default=50, help="progress log interval (0 = off)")
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("simulate", help="forward-only rollout from a checkpoint or a built-in preset")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint directory or run directory")
    src.add_argument("--preset", choices=["gray-scott"], help="built-in demo system")
    s.add_argument("--T", type=int, help="coarse steps (default: config T, or 1000 for gray-scott)")
    s.add_argument("--dt-divisor", type=int, default=1, help="split each step into this many substeps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--z", help="latent bits as a 0/1 string (default: random from --seed)")
    s.add_argument("--grid", type=int, nargs=2, default=[64, 64], help="grid for the gray-scott preset")
    s.add_argument("--save-every", type=int, default=1, help="keep every k-th coarse state")
    s.add_argument("--render-every", type=int, default=0, help="write a PNG every k coarse states")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("ablate", help="optimized vs randomized-component controls")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--conditions", nargs="+", default=["all"], help=f"subset of {', '.join(analysis.CONDITIONS)}")
    a.add_argument("--n", type=int, default=8, help="replicates per condition")
    a.add_argument("--metric", choices=analysis.METRICS, default="pearson")
    a.add_argument("--T", type=int)
    a.add_argument("--dt-divisor", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--output", required=True)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("render", help="PNG frames from a trajectory; CRN graph from a checkpoint")
    r.add_argument("trajectory", nargs="?", help="trajectory directory written by simulate")
    r.add_argument("--crn", help="checkpoint whose reaction network to export (reactions.txt, crn.dot)")
    r.add_argument("--every", type=int, default=1)
    r.add_argument("--scale", type=int, default=4)
    r.add_argument("--threshold", type=float, default=1e-6, help="prune reactions with net rate below this")
    r.add_argument("--output")
    r.set_defaults(func=cmd_render)

    v = sub.add_parser("verify", help="gradient, conservation, equilibrium and entropy-sign suites")
    v.add_argument("--quick", action="store_true")
    v.add_argument("--suite", action="append", help=f"one of {', '.join(verify.SUITES)} (repeatable)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", help="finite-difference checks of ops and loss pipelines")
    g.add_argument("--op", action="append", help="op name (repeatable); default all")
    g.add_argument("--pipeline", action="append", help="loss pipeline name (repeatable); default all")
    g.add_argument("--repeats", type=int, default=1)
    g.add_argument("--tol", type=float, default=verify.GRAD_TOL)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except config.ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
