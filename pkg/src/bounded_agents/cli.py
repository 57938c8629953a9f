"""``bounded-agents`` command line: train, simulate, calibrate, oracle, rank.

Exit codes: 0 ok, 2 configuration, 3 dimension mismatch, 4 data, 5 convergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    FULL_MU,
    FULL_SIGMA_STAR,
    Budget,
    DatasetError,
    Grid,
    env_histogram,
    rank_models,
    read_dataset,
    run_calibration,
    simulate_values,
    write_cell_results,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .core import Supertype
from .envs import ENV_NAMES, ConfigError, make_env
from .equilibrium import (
    EquilibriumError,
    cobweb_excess,
    cobweb_rational_price,
    cournot_nash,
    logit_qre,
    supply_chain_nash,
)
from .learner import KL_MODES, TrainingConfig, run_episodes, train, write_curve
from .policy import encode_observation, forward, observation_dim

log = logging.getLogger("bounded_agents")

EXIT_OK, EXIT_CONFIG, EXIT_DIM, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4, 5
SEED_ENV = "BOUNDED_AGENTS_SEED"


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------- config


def load_config(path) -> dict:
    """Read a JSON run config (schema in the README)."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return data


def pick(flag, cfg: dict, key: str, required: bool = True, default=None):
    """Flag value if given, else ``cfg[key]``; dotted keys walk nested objects."""
    if flag is not None:
        return flag
    node = cfg
    for part in key.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise CliError(f"missing config key {key!r} (pass it in the config file or as a flag)")
            return default
        node = node[part]
    return node


def resolve_seed(flag, cfg: dict) -> int:
    seed = pick(flag, cfg, "seed", required=False)
    if seed is None:
        seed = os.environ.get(SEED_ENV, 0)
    try:
        return int(seed)
    except (TypeError, ValueError):
        raise CliError(f"seed must be an integer, got {seed!r}") from None


def training_config(args, cfg: dict, seed: int) -> TrainingConfig:
    base = TrainingConfig.desk() if getattr(args, "profile", "full") == "desk" else TrainingConfig()
    over = dict(cfg.get("training", {}))
    for flag, key in (("iterations", "iterations"), ("episodes", "episodes_per_iteration"),
                      ("kl_mode", "kl_mode")):
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = val
    over["seed"] = seed
    try:
        return dataclasses.replace(base, **over)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from None


def build_env(name, overrides):
    try:
        return make_env(name, overrides)
    except (ConfigError, TypeError) as exc:
        raise CliError(f"invalid environment config: {exc}") from None


def write_manifest(out: Path, command: str, argv: list[str], config_path, seed: int, extra: dict | None = None):
    manifest = {
        "command": command,
        "argv": argv,
        "config": str(config_path) if config_path else None,
        "seed": seed,
        "output_dir": str(out),
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **(extra or {}),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(x) -> str:
    return repr(float(x))


# -------------------------------------------------------------------- commands


def cmd_train(args, argv) -> int:
    cfg = load_config(args.config)
    env_name = pick(args.env, cfg, "env")
    env = build_env(env_name, cfg.get("env_config", {}))
    try:
        st = Supertype(
            float(pick(args.mu, cfg, "supertype.mu")),
            float(pick(args.sigma_star, cfg, "supertype.sigma_star")),
            prior=pick(args.prior, cfg, "supertype.prior", required=False, default="uniform"),
            prior_boost=float(pick(args.prior_boost, cfg, "supertype.prior_boost", required=False, default=3.0)),
        )
    except ValueError as exc:
        raise CliError(f"invalid supertype: {exc}") from None
    seed = resolve_seed(args.seed, cfg)
    tcfg = training_config(args, cfg, seed)
    out = _out_dir(args.out)
    res = train(env, st, tcfg)
    ckpt = Checkpoint(env_name, dict(cfg.get("env_config", {})), st, res.config, res.params, res.value.params,
                      meta={"critic_return_mean": res.value.ret_mean, "critic_return_var": res.value.ret_var})
    save_checkpoint(out / "policy.ckpt", ckpt)
    write_curve(out / "curve.csv", res.curve)
    modes = greedy_modes(ckpt)
    write_manifest(out, "train", argv, args.config, seed, {"greedy_modes": modes})
    print(f"trained {env_name} mu={st.mu:g} sigma*={st.sigma_star:g} for {res.config.iterations} iterations")
    print("greedy action per agent at lambda=mu:", " ".join(f"{m:g}" for m in modes))
    print(f"checkpoint: {out / 'policy.ckpt'}")
    return EXIT_OK


def greedy_modes(ckpt: Checkpoint) -> list[float]:
    env = make_env(ckpt.env, ckpt.env_overrides)
    q = ckpt.supertype.prior_for(env.space)
    feats = env.features(env.reset(1, np.random.default_rng(0)))[0]
    out = []
    for i in range(env.n_agents):
        o = encode_observation(feats[i], i, env.n_agents, ckpt.supertype.mu, q)
        out.append(float(env.space.values[int(np.argmax(forward(ckpt.params, o).probs))]))
    return out


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_simulate(args, argv) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    env_name = args.env or ckpt.env
    env = build_env(env_name, ckpt.env_overrides if env_name == ckpt.env else {})
    want = (observation_dim(env.n_features, env.space.n), env.space.n)
    have = (ckpt.params.shape.obs_dim, ckpt.params.shape.n_out)
    if want != have:
        raise CliError(f"checkpoint (obs {have[0]}, actions {have[1]}) does not fit {env_name} "
                       f"(obs {want[0]}, actions {want[1]})", EXIT_DIM)
    st = ckpt.supertype
    if args.mu is not None or args.sigma_star is not None:
        st = dataclasses.replace(st, mu=st.mu if args.mu is None else args.mu,
                                 sigma_star=st.sigma_star if args.sigma_star is None else args.sigma_star)
    seed = resolve_seed(args.seed, {})
    out = _out_dir(args.out)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    _, ro = run_episodes(env, ckpt.params, st, args.episodes, rng)

    vals = env.space.values
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "step", "agent", "lambda", "action", "utility", "price"])
        for e in range(ro.actions.shape[0]):
            for t in range(ro.actions.shape[1]):
                price = "" if ro.price is None else _fmt(ro.price[e, t])
                for i in range(ro.actions.shape[2]):
                    w.writerow([e, t, i, _fmt(ro.lams[e, i]), f"{vals[ro.actions[e, t, i]]:g}",
                                _fmt(ro.utilities[e, t, i]), price])
    sim = ro.price.ravel() if env.kind == "cobweb" else vals[ro.actions.ravel()]
    hist = env_histogram(env, sim)
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "mass"])
        for v, m in zip(vals, hist):
            w.writerow([f"{v:g}", _fmt(m)])
    extra = {"checkpoint": str(args.checkpoint), "episodes": args.episodes, "price_floored": ro.floored}
    write_manifest(out, "simulate", argv, None, seed, extra)
    if ro.floored:
        print(f"note: Cournot price floored at 0 in {ro.floored} market rounds")
    print(f"wrote {out / 'histogram.csv'} and {out / 'trace.csv'}")
    return EXIT_OK


def parse_grid(specs) -> Grid:
    """``["mu=0,1", "sigma_star=0,0.5"]`` -> Grid; unspecified axes keep the full grid."""
    mu, ss = FULL_MU, FULL_SIGMA_STAR
    for spec in specs or []:
        key, _, vals = spec.partition("=")
        try:
            values = tuple(float(v) for v in vals.split(",") if v.strip())
        except ValueError:
            raise CliError(f"bad grid spec {spec!r}") from None
        if not values:
            raise CliError(f"grid spec {spec!r} lists no values")
        if key.strip() in ("mu",):
            mu = values
        elif key.strip() in ("sigma_star", "sigma-star"):
            ss = values
        else:
            raise CliError(f"unknown grid axis {key!r}; use mu= or sigma_star=")
    return Grid(mu, ss)


def cmd_calibrate(args, argv) -> int:
    cfg = load_config(args.config)
    try:
        ds = read_dataset(args.dataset)
    except DatasetError as exc:
        raise CliError(f"{args.dataset}: {exc}", EXIT_DATA) from None
    except OSError as exc:
        raise CliError(f"cannot read dataset: {exc}", EXIT_DATA) from None
    env_name = args.env or cfg.get("env") or ds.env
    env_over = dict(cfg.get("env_config", {}))
    env = build_env(env_name, env_over)
    try:
        env_histogram(env, ds.values)
    except ValueError as exc:
        raise CliError(f"{args.dataset}: {exc}", EXIT_DATA) from None
    grid = parse_grid(args.grid or cfg.get("grid"))
    seed = resolve_seed(args.seed, cfg)
    tcfg = training_config(args, cfg, seed)
    budget = Budget(tcfg, args.sim_episodes or cfg.get("sim_episodes", Budget().sim_episodes))
    out = _out_dir(args.out)
    cache = out / "checkpoints" if args.keep_checkpoints else None
    report = run_calibration(ds, env_name, grid, budget, seed, env_over, jobs=args.jobs, cache_dir=cache)
    write_cell_results(out / "cells.csv", report.cells)
    with open(out / "selections.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["repetition", "fold", "mu", "sigma_star", "train_mse", "test_rmse"])
        for s in report.selections:
            w.writerow([s.repetition, s.fold, _fmt(s.mu), _fmt(s.sigma_star), _fmt(s.train_mse), _fmt(s.test_rmse)])
    summ = report.summary()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["env", "model", "rmse_mean", "rmse_std"])
        w.writerow([summ["env"], summ["model"], _fmt(summ["rmse_mean"]), _fmt(summ["rmse_std"])])
    write_manifest(out, "calibrate", argv, args.config, seed,
                   {"dataset": str(args.dataset), "cells": len(grid), "jobs": args.jobs})
    counts = {}
    for s in report.selections:
        counts[s.cell] = counts.get(s.cell, 0) + 1
    best = max(counts, key=lambda c: (counts[c], -c[0], -c[1]))
    print(f"{env_name}: test RMSE {summ['rmse_mean']:.4f} ± {summ['rmse_std']:.4f} over {summ['folds']} folds")
    print(f"most selected cell: mu={best[0]:g} sigma*={best[1]:g} ({counts[best]}/{len(report.selections)} folds)")
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    if args.oracle == "qre":
        env = build_env(args.game, {})
        try:
            sol = logit_qre(env.config, args.lam, tol=args.tol, max_iter=args.max_iter, damping=args.damping)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        except EquilibriumError as exc:
            raise CliError(str(exc), EXIT_CONVERGENCE) from None
        for i, d in enumerate(sol.dists):
            print(f"player {i}: " + " ".join(f"{p:.6f}" for p in d))
        print(f"iterations {sol.iterations} residual {sol.residual:.3e}")
    elif args.oracle == "nash":
        env = build_env(args.env, {})
        try:
            if env.kind == "cournot":
                q = cournot_nash(env.config)
            elif env.kind == "supply_chain":
                q = supply_chain_nash(env.config)
            elif env.kind == "cobweb":
                q = cobweb_rational_price(env.config)
            else:
                raise CliError(f"no Nash oracle for {args.env}; use `oracle qre`")
        except EquilibriumError as exc:
            raise CliError(str(exc), EXIT_CONVERGENCE) from None
        print(f"{q:g}")
    else:
        over = {}
        if args.b is not None:
            over["b"] = args.b
        if args.producers is not None:
            over["producers"] = args.producers
        env = build_env("cobweb", over)
        try:
            p = cobweb_rational_price(env.config, tol=args.tol)
        except EquilibriumError as exc:
            raise CliError(str(exc), EXIT_CONVERGENCE) from None
        print(f"p* = {p:.12f}")
        print(f"residual {abs(cobweb_excess(env.config, p)):.3e}")
    return EXIT_OK


def parse_weights(spec: str | None) -> dict | None:
    if not spec:
        return None
    out = {}
    for part in spec.split(","):
        key, _, val = part.partition("=")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise CliError(f"bad weight {part!r}; expected env=value") from None
    return out


def cmd_rank(args, argv) -> int:
    means, stds = {}, {}
    try:
        with open(args.rmse, newline="") as fh:
            for n, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    env, model = row["env"], row["model"]
                    means.setdefault(env, {})[model] = float(row["rmse_mean"])
                    stds.setdefault(env, {})[model] = float(row.get("rmse_std") or 0.0)
                except (KeyError, TypeError, ValueError):
                    raise CliError(f"{args.rmse}: line {n}: need env, model, rmse_mean[, rmse_std]", EXIT_DATA) from None
    except OSError as exc:
        raise CliError(f"cannot read {args.rmse}: {exc}", EXIT_DATA) from None
    try:
        table = rank_models(means, parse_weights(args.weights), stds)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = _out_dir(args.out)
    table.write_csv(out / "ranks.csv")
    text = table.render()
    (out / "ranks.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        old = list(manifest["argv"])
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read manifest {args.manifest}: {exc}") from None
    if args.out:
        if "--out" not in old:
            raise CliError("manifest command has no --out to redirect")
        old[old.index("--out") + 1] = args.out
    return main(old)


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bounded-agents", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a shared supertype policy")
    t.add_argument("--config")
    t.add_argument("--env", choices=ENV_NAMES)
    t.add_argument("--mu", type=float)
    t.add_argument("--sigma-star", type=float)
    t.add_argument("--prior", choices=("uniform", "prominent"))
    t.add_argument("--prior-boost", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--profile", choices=("full", "desk"), default="full")
    t.add_argument("--iterations", type=int)
    t.add_argument("--episodes", type=int, help="episodes per iteration")
    t.add_argument("--kl-mode", choices=KL_MODES)
    t.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="roll out a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--env", choices=ENV_NAMES, help="defaults to the checkpoint's environment")
    s.add_argument("--episodes", type=int, default=1000)
    s.add_argument("--mu", type=float)
    s.add_argument("--sigma-star", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    c = sub.add_parser("calibrate", help="5x2 grid-search calibration against a dataset")
    c.add_argument("--dataset", required=True)
    c.add_argument("--config")
    c.add_argument("--env", choices=ENV_NAMES)
    c.add_argument("--grid", nargs="+", metavar="AXIS=V1,V2")
    c.add_argument("--seed", type=int)
    c.add_argument("--profile", choices=("full", "desk"), default="desk")
    c.add_argument("--iterations", type=int)
    c.add_argument("--episodes", type=int)
    c.add_argument("--kl-mode", choices=KL_MODES)
    c.add_argument("--sim-episodes", type=int)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--keep-checkpoints", action="store_true")
    c.add_argument("--out", required=True)

    o = sub.add_parser("oracle", help="equilibrium oracles")
    osub = o.add_subparsers(dest="oracle", required=True)
    q = osub.add_parser("qre", help="logit QRE of a matrix game")
    q.add_argument("--game", choices=("rps", "matching_pennies", "bandit"), required=True)
    q.add_argument("--lambda", dest="lam", type=float, required=True)
    q.add_argument("--tol", type=float, default=1e-10)
    q.add_argument("--max-iter", type=int, default=100_000)
    q.add_argument("--damping", type=float, default=0.5)
    n = osub.add_parser("nash", help="Nash action (cobweb: rational-expectations price)")
    n.add_argument("--env", choices=("supply_chain", "cournot_duopoly", "cournot_triopoly", "cobweb"), required=True)
    cw = osub.add_parser("cobweb-star", help="rational-expectations cobweb price")
    cw.add_argument("--b", type=float)
    cw.add_argument("--producers", type=int)
    cw.add_argument("--tol", type=float, default=1e-10)

    r = sub.add_parser("rank", help="rank models by RMSE per environment")
    r.add_argument("--rmse", required=True, help="CSV with env,model,rmse_mean[,rmse_std]")
    r.add_argument("--weights", help="env=w,... with each w in (0, 1]; unlisted envs weigh 1")
    r.add_argument("--out", required=True)

    rr = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", help="write to a different output directory")
    return p


COMMANDS = {"train": cmd_train, "simulate": cmd_simulate, "calibrate": cmd_calibrate,
            "oracle": cmd_oracle, "rank": cmd_rank, "rerun": cmd_rerun}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
