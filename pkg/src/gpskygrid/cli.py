"""
Command-line driver.

    gpskygrid run --config run.cfg [--seed N] [--out-dir DIR] [--resume]
    gpskygrid resume --config run.cfg [--out-dir DIR]
    gpskygrid summarize --out-dir DIR [--burn-in F] [--threshold T]
    gpskygrid simulate --config scenario.cfg [--seed N] [--out-dir DIR]

Exit status is 0 on success, 2 for unreadable or invalid input and 1 for
failures during sampling.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, coalescent, hmc, prior, simulate, summary, treeio

log = logging.getLogger("gpskygrid")


class InputError(Exception):
    """Bad or missing input; reported with exit status 2."""


# --------------------------------------------------------------------------
# Loading a run
# --------------------------------------------------------------------------


def _read_text(path, what):
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"{what} not found: {path}") from None
    except OSError as err:
        raise InputError(f"cannot read {what} {path}: {err.strerror}") from None


def load_run_config(path, seed=None, out_dir=None) -> treeio.RunConfig:
    text = _read_text(path, "config file")
    try:
        cfg = treeio.parse_config(text, str(path), Path(path).parent)
    except treeio.ConfigError as err:
        raise InputError(str(err)) from None
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = str(Path(out_dir).resolve())
    return cfg


def make_grid(cfg):
    if cfg.grid_points is not None:
        return coalescent.Grid(np.asarray(cfg.grid_points, dtype=float))
    return coalescent.build_grid(cfg.cutoff, cfg.intervals)


def load_trees(cfg):
    trees = []
    for i, name in enumerate(cfg.trees):
        path = cfg.resolve(name)
        text = _read_text(path, "tree file")
        try:
            tree = treeio.parse_newick(text)
        except treeio.NewickError as err:
            raise InputError(f"{path}: {err}") from None
        if cfg.tip_dates:
            dpath = cfg.resolve(cfg.tip_dates[i])
            dtext = _read_text(dpath, "tip-date file")
            try:
                tree = treeio.parse_tip_dates(dtext, tree, cfg.date_direction)
            except treeio.TipDateError as err:
                raise InputError(f"{dpath}: {err}") from None
        trees.append(tree)
    return trees


def build_posterior(cfg):
    """Read every input named by ``cfg`` and assemble the posterior."""
    grid = make_grid(cfg)
    trees = load_trees(cfg)
    try:
        data = coalescent.CoalescentData.from_trees(trees, grid)
    except coalescent.LedgerError as err:
        raise InputError(str(err)) from None
    cpath = cfg.resolve(cfg.covariates)
    try:
        table = treeio.load_covariates(_read_text(cpath, "covariate file"), grid, cfg.standardize)
    except treeio.CovariateError as err:
        raise InputError(f"{cpath}: {err}") from None
    settings = prior.PriorSettings(
        tau_shape=cfg.tau_shape,
        tau_scale=cfg.tau_scale,
        sigma2_rate=cfg.sigma2_rate,
        lengthscale_rate=cfg.lengthscale_rate,
        lengthscale_min=cfg.lengthscale_min,
        jitter=cfg.jitter,
        level_sd=cfg.gmrf_level_sd,
    )
    try:
        return prior.Posterior(data, table, settings, whiten=cfg.whiten)
    except prior.PriorError as err:
        raise InputError(f"{cpath}: {err}") from None


def sampler_settings(cfg) -> hmc.SamplerSettings:
    return hmc.SamplerSettings(
        leapfrog_steps=cfg.leapfrog_steps,
        step_size=cfg.step_size,
        target_accept=cfg.target_accept,
        preconditioning=cfg.preconditioning,
        mass_refresh=cfg.mass_refresh,
        refresh_after_warmup=cfg.refresh_after_warmup,
        warmup=cfg.warmup,
        iterations=cfg.iterations,
        thin=cfg.thin,
    )


def config_hash(cfg) -> str:
    return hashlib.sha256(cfg.to_text().encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Output files
# --------------------------------------------------------------------------


def trace_path(out_dir, chain):
    return Path(out_dir) / f"trace_chain{chain + 1}.tsv"


def checkpoint_path(out_dir, chain):
    return Path(out_dir) / f"checkpoint_chain{chain + 1}.txt"


def write_covariates_used(path, posterior):
    """Interval bounds and the covariate values the sampler saw."""
    grid = posterior.data.grid
    starts = np.concatenate(([0.0], grid.points))
    ends = np.concatenate((grid.points, [math.inf]))
    table = posterior.covariates
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "start", "end", *table.names])
        for k in range(posterior.M):
            cells = ["" if table.missing[p, k] else repr(float(table.values[p, k]))
                     for p in range(table.n_covariates)]
            end = "" if math.isinf(ends[k]) else repr(float(ends[k]))
            w.writerow([k + 1, repr(float(starts[k])), end, *cells])


def write_meta(path, cfg, extra=()):
    lines = [
        f"config_sha256\t{config_hash(cfg)}",
        f"seed\t{cfg.seed}",
        f"chains\t{cfg.chains}",
        f"burn_in\t{cfg.burn_in}",
        f"gpskygrid\t{__version__}",
        f"python\t{platform.python_version()}",
        f"numpy\t{np.__version__}",
        f"scipy\t{scipy.__version__}",
        *extra,
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def truncate_trace(path, last_iteration):
    """Drop trace rows written after ``last_iteration`` (they will be redone)."""
    path = Path(path)
    if not path.exists():
        return False
    keep = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.endswith("\n"):
                break  # torn final line
            if i == 0 or int(line.split("\t", 1)[0]) <= last_iteration:
                keep.append(line)
    path.write_text("".join(keep), encoding="utf-8")
    return True


# --------------------------------------------------------------------------
# Chains
# --------------------------------------------------------------------------


def run_chain(posterior, cfg, chain, out_dir, state=None, stop_at=None):
    """
    Run (or continue) one chain, appending retained rows to its trace and
    checkpointing every ``checkpoint_every`` iterations. Returns the state.
    """
    sampler = hmc.Sampler(posterior, sampler_settings(cfg))
    tpath = trace_path(out_dir, chain)
    cpath = checkpoint_path(out_dir, chain)
    meta = {"chain": chain, "config_sha256": config_hash(cfg)}
    if state is None:
        rng = hmc.rng_for_chain(cfg.seed, chain, cfg.chains)
        state = sampler.init_state(rng)
        with open(tpath, "w", encoding="utf-8") as fh:
            fh.write("\t".join(hmc.trace_header(posterior)) + "\n")
    with open(tpath, "a", encoding="utf-8") as fh:

        def on_step(st):
            if sampler.is_retained(st.iteration):
                fh.write("\t".join(hmc.trace_row(posterior, st)) + "\n")
            if st.iteration % cfg.checkpoint_every == 0 or st.iteration == sampler.total_iterations:
                fh.flush()
                hmc.save_checkpoint(cpath, st, meta)

        sampler.run(state, on_step, stop_at=stop_at)
    return state


def _summarize_dir(out_dir, n_chains, burn_in, threshold):
    traces = [trace_path(out_dir, c) for c in range(n_chains)]
    for t in traces:
        if not t.exists():
            raise InputError(f"trace file not found: {t}")
    grid = Path(out_dir) / "covariates_used.csv"
    if not grid.exists():
        raise InputError(f"covariate record not found: {grid}")
    try:
        result = summary.summarize(traces, grid, out_dir, burn_in, threshold)
    except summary.SummaryError as err:
        raise InputError(str(err)) from None
    if n_chains > 1 and result["max_rhat"] > 1.1:
        log.warning("max Gelman-Rubin statistic %.3f exceeds 1.1", result["max_rhat"])
    return result


def cmd_run(args):
    cfg = load_run_config(args.config, args.seed, args.out_dir)
    if args.resume:
        return cmd_resume(args)
    posterior = build_posterior(cfg)
    out = Path(cfg.resolve(cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    write_covariates_used(out / "covariates_used.csv", posterior)
    (out / "config_used.cfg").write_text(cfg.to_text(), encoding="utf-8")
    for chain in range(cfg.chains):
        run_chain(posterior, cfg, chain, out, stop_at=args.stop_at)
    return _finish(cfg, out, args)


def cmd_resume(args):
    cfg = load_run_config(args.config, args.seed, args.out_dir)
    posterior = build_posterior(cfg)
    out = Path(cfg.resolve(cfg.out_dir))
    for chain in range(cfg.chains):
        cpath = checkpoint_path(out, chain)
        if cpath.exists():
            try:
                state, meta = hmc.load_checkpoint(cpath)
            except (ValueError, KeyError) as err:
                raise InputError(f"{cpath}: {err}") from None
            if meta.get("config_sha256") != config_hash(cfg):
                raise InputError(f"{cpath}: checkpoint was written with a different config")
            truncate_trace(trace_path(out, chain), state.iteration)
            run_chain(posterior, cfg, chain, out, state=state, stop_at=args.stop_at)
        else:
            run_chain(posterior, cfg, chain, out, stop_at=args.stop_at)
    return _finish(cfg, out, args)


def _finish(cfg, out, args):
    burn_in = cfg.burn_in if args.burn_in is None else args.burn_in
    write_meta(out / "run_meta.txt", cfg, [f"config\t{Path(args.config).resolve()}"])
    if args.stop_at is not None:
        return 0
    try:
        _summarize_dir(out, cfg.chains, burn_in, args.threshold)
    except InputError as err:
        log.warning("summary skipped: %s", err)
    return 0


def cmd_summarize(args):
    out = Path(args.out_dir)
    if not out.is_dir():
        raise InputError(f"output directory not found: {out}")
    n = 0
    while trace_path(out, n).exists():
        n += 1
    if n == 0:
        raise InputError(f"no trace files in {out}")
    burn_in = 0.1 if args.burn_in is None else args.burn_in
    result = _summarize_dir(out, n, burn_in, args.threshold)
    for name, pts in result["flattening"].items():
        print(f"{name}: flattening points {', '.join(f'{p:.4g}' for p in pts) or 'none'}")
    return 0


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------

_SIM_KEYS = {
    "kind": str,
    "taxa": int,
    "seed": int,
    "intervals": int,
    "cutoff": float,
    "a": float,
    "b": float,
    "c": float,
    "levels": treeio._floats,
    "covariate": str,
    "isochronous": treeio._bool,
    "sampling_span": float,
    "sampling_batches": int,
    "warmup": int,
    "iterations": int,
}


def parse_sim_spec(text, source="<spec>"):
    spec = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _SIM_KEYS:
            raise InputError(f"{source}:{lineno}: unknown key {key!r}")
        if key in spec:
            raise InputError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            spec[key] = _SIM_KEYS[key](value)
        except ValueError as err:
            raise InputError(f"{source}:{lineno}: bad value for {key!r}: {err}") from None
    if spec.get("kind", "linear") not in ("linear", "concave", "table"):
        raise InputError(f"{source}: kind must be linear, concave or table")
    return spec


def write_scenario(scenario, out_dir, spec=None):
    """Write tree, tip dates, covariates, truth and a ready-to-run config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree = scenario.tree
    (out / "tree.nwk").write_text(treeio.serialize_newick(tree) + "\n", encoding="utf-8")
    with open(out / "tip_dates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "date"])
        for i, lab in enumerate(tree.labels):
            w.writerow([lab, repr(float(tree.heights[i]))])
    table = scenario.covariates
    (out / "covariates.csv").write_text(
        treeio.format_covariates(table.values, table.names), encoding="utf-8"
    )
    starts = np.concatenate(([0.0], scenario.grid.points))
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "start", *table.names, "logne"])
        for k in range(scenario.truth.size):
            w.writerow([k + 1, repr(float(starts[k])),
                        *(repr(float(v)) for v in table.values[:, k]),
                        repr(float(scenario.truth[k]))])
    spec = spec or {}
    M = scenario.truth.size
    cfg = treeio.RunConfig(
        trees=["tree.nwk"],
        tip_dates=["tip_dates.csv"],
        covariates="covariates.csv",
        cutoff=float(scenario.grid.points[-1]),
        intervals=M,
        seed=int(spec.get("seed", 1)),
        warmup=int(spec.get("warmup", 500)),
        iterations=int(spec.get("iterations", 2000)),
        out_dir="out",
    )
    lines = [f"# {scenario.kind} scenario, coefficients {scenario.coefs}"]
    (out / "run.cfg").write_text("\n".join(lines) + "\n" + cfg.to_text(), encoding="utf-8")


def scenario_from_spec(spec, base_dir="."):
    kind = spec.get("kind", "linear")
    M = spec.get("intervals", 24)
    covariate = None
    if "covariate" in spec:
        path = Path(base_dir) / spec["covariate"]
        text = _read_text(path, "covariate file")
        try:
            table = treeio.load_covariates(text, coalescent.build_grid(1.0, M), standardize=True)
        except treeio.CovariateError as err:
            raise InputError(f"{path}: {err}") from None
        if table.missing.any():
            raise InputError(f"{path}: simulation covariates may not have missing values")
        covariate = table.values[0]
    if kind == "table":
        if "levels" not in spec:
            raise InputError("kind = table needs 'levels'")
        coefs = {"levels": spec["levels"]}
        M = len(spec["levels"])
    else:
        defaults = simulate.LINEAR_DEFAULT if kind == "linear" else simulate.CONCAVE_DEFAULT
        coefs = {k: spec.get(k, v) for k, v in defaults.items()}
    try:
        return simulate.make_scenario(
            kind,
            covariate=covariate,
            taxa=spec.get("taxa", 200),
            seed=spec.get("seed", 0),
            cutoff=spec.get("cutoff"),
            coefs=coefs,
            sampling_span=spec.get("sampling_span", 0.8),
            sampling_batches=spec.get("sampling_batches", 20),
            isochronous=spec.get("isochronous", True),
            n_intervals=M,
        )
    except ValueError as err:
        raise InputError(str(err)) from None


def cmd_simulate(args):
    path = Path(args.config)
    spec = parse_sim_spec(_read_text(path, "scenario spec"), str(path))
    if args.seed is not None:
        spec["seed"] = args.seed
    scenario = scenario_from_spec(spec, path.parent)
    out = Path(args.out_dir) if args.out_dir else path.parent / "scenario"
    write_scenario(scenario, out, spec)
    print(f"wrote {scenario.kind} scenario with {scenario.tree.n_tips} tips to {out}")
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="gpskygrid", description=__doc__.split("\n\n")[0].strip())
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out-dir", help="override the configured output directory")
        p.add_argument("--burn-in", type=float, help="burn-in fraction for the summary")
        p.add_argument("--threshold", type=float, default=0.05,
                       help="derivative threshold for flattening points (default 0.05)")

    p = sub.add_parser("run", help="run the sampler")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    p.add_argument("--stop-at", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue chains from their checkpoints")
    common(p)
    p.add_argument("--stop-at", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("summarize", help="summarize the traces in an output directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--burn-in", type=float)
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("simulate", help="simulate a scenario from a spec file")
    p.add_argument("--config", required=True, help="scenario spec file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as err:
        print(f"gpskygrid: error: {err}", file=sys.stderr)
        return 2
    except (prior.PriorError, FloatingPointError, RuntimeError) as err:
        print(f"gpskygrid: sampling failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
