"""Grid-search calibration of ``(mu, sigma_star)`` with repeated 5x2 cross-fold validation.

Data and model outputs are compared as per-bin probability masses on the
environment's action grid (cobweb: realised prices binned to the 0.1 grid).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .core import ActionSpace, Supertype
from .envs import Environment, make_env
from .learner import TrainingConfig, TrainingDivergedError, run_episodes, train
from .policy import PolicyParameters

log = logging.getLogger(__name__)

FULL_MU = (0.0, 0.25, 0.5, 1.0, 2.5, 5.0, 10.0)
FULL_SIGMA_STAR = (0.0, 0.05, 0.1, 0.25, 0.5, 1.0)
REPETITIONS = 5


class DatasetError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class FoldOverlapError(RuntimeError):
    pass


# -------------------------------------------------------------------- datasets


@dataclass
class EmpiricalDataset:
    """Recorded decisions (or cobweb prices) for one environment."""

    env: str
    subjects: list[str]
    rounds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.rounds = np.asarray(self.rounds, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) == 0:
            raise DatasetError("dataset is empty")
        if not (len(self.subjects) == len(self.rounds) == len(self.values)):
            raise DatasetError("column lengths differ")

    def __len__(self):
        return len(self.values)

    def subset(self, idx) -> "EmpiricalDataset":
        idx = np.asarray(idx, dtype=int)
        return EmpiricalDataset(self.env, [self.subjects[i] for i in idx], self.rounds[idx], self.values[idx])


DATASET_HEADER = ("env", "subject", "round", "value")


def read_dataset(path) -> EmpiricalDataset:
    """Parse a ``env,subject,round,value`` CSV.

    Raises:
        DatasetError: malformed rows (with their 1-based line number), mixed envs, or no rows.
    """
    subjects, rounds, values, env = [], [], [], None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != DATASET_HEADER:
            raise DatasetError(f"header must be {','.join(DATASET_HEADER)}", 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DatasetError(f"expected 4 fields, got {len(row)}", line)
            e, s, r, v = (c.strip() for c in row)
            try:
                r_i, v_f = int(r), float(v)
            except ValueError:
                raise DatasetError(f"round/value not numeric: {row!r}", line) from None
            if not math.isfinite(v_f):
                raise DatasetError("value is not finite", line)
            if env is None:
                env = e
            elif e != env:
                raise DatasetError(f"mixed environments {env!r} and {e!r}", line)
            subjects.append(s)
            rounds.append(r_i)
            values.append(v_f)
    if env is None:
        raise DatasetError("dataset has no rows")
    return EmpiricalDataset(env, subjects, rounds, values)


def write_dataset(path, ds: EmpiricalDataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for s, r, v in zip(ds.subjects, ds.rounds, ds.values):
            w.writerow([ds.env, s, int(r), repr(float(v)) if not float(v).is_integer() else int(v)])


# ------------------------------------------------------------------ histograms


def bin_indices(values, space: ActionSpace, clip: bool = False) -> np.ndarray:
    """Grid index of every value.

    With ``clip`` values are rounded to the nearest grid point and clamped to the
    grid's range (used for realised prices); otherwise off-grid values raise.
    """
    v = np.asarray(values, dtype=float)
    k = (v - space.lo) / space.step
    idx = np.rint(k).astype(int)
    if clip:
        return np.clip(idx, 0, space.n - 1)
    bad = (np.abs(k - idx) > 1e-6) | (idx < 0) | (idx >= space.n)
    if np.any(bad):
        raise ValueError(f"value {v[bad][0]} is off the grid [{space.lo}, {space.hi}] step {space.step}")
    return idx


def histogram(values, space: ActionSpace, clip: bool = False) -> np.ndarray:
    idx = bin_indices(values, space, clip)
    if idx.size == 0:
        raise ValueError("cannot histogram zero values")
    counts = np.bincount(idx, minlength=space.n).astype(float)
    return counts / counts.sum()


def env_histogram(env: Environment, values) -> np.ndarray:
    return histogram(values, env.space, clip=env.kind == "cobweb")


def mse(sim_hist, emp_hist) -> float:
    a, b = np.asarray(sim_hist, dtype=float), np.asarray(emp_hist, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"histogram length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def rmse(sim_hist, emp_hist) -> float:
    return math.sqrt(mse(sim_hist, emp_hist))


# ----------------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldPlan:
    """``halves[r] = (a, b)``: repetition ``r`` splits the indices into two halves."""

    halves: tuple[tuple[np.ndarray, np.ndarray], ...]
    n: int
    seed: int

    def folds(self):
        """Yield ``(repetition, fold, train_idx, test_idx)``; each half trains once."""
        for r, (a, b) in enumerate(self.halves):
            yield r, 0, a, b
            yield r, 1, b, a


def split_5x2(n_or_dataset, seed: int, repetitions: int = REPETITIONS) -> FoldPlan:
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    if n < 2:
        raise ValueError(f"need at least 2 observations to split, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 52]))
    halves = []
    for _ in range(repetitions):
        perm = rng.permutation(n)
        cut = (n + 1) // 2
        halves.append((np.sort(perm[:cut]), np.sort(perm[cut:])))
    return FoldPlan(tuple(halves), int(n), seed)


# ------------------------------------------------------------------------ grid


@dataclass(frozen=True)
class Grid:
    mu_values: tuple[float, ...] = FULL_MU
    sigma_star_values: tuple[float, ...] = FULL_SIGMA_STAR

    def cells(self) -> list[tuple[float, float]]:
        return list(itertools.product(self.mu_values, self.sigma_star_values))

    def __len__(self):
        return len(self.mu_values) * len(self.sigma_star_values)

    def position(self, cell) -> tuple[int, int]:
        return self.mu_values.index(cell[0]), self.sigma_star_values.index(cell[1])

    def are_neighbors(self, a, b) -> bool:
        """Same cell or adjacent along either axis (diagonals included)."""
        (i, j), (k, l) = self.position(a), self.position(b)
        return abs(i - k) <= 1 and abs(j - l) <= 1


# ----------------------------------------------------------------- simulation


@dataclass(frozen=True)
class Budget:
    """How hard each grid cell is trained and simulated."""

    training: TrainingConfig = TrainingConfig.desk()
    sim_episodes: int = 2000


def simulate_values(params: PolicyParameters, env: Environment, supertype: Supertype,
                    n_episodes: int, seed: int) -> np.ndarray:
    """Frozen-policy rollouts; decisions (or realised cobweb prices) as values."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    _, ro = run_episodes(env, params, supertype, n_episodes, rng)
    if env.kind == "cobweb":
        return ro.price.ravel()
    return env.space.values[ro.actions.ravel()]


def simulate_distribution(params: PolicyParameters, env: Environment, supertype: Supertype,
                          n_episodes: int, seed: int) -> np.ndarray:
    return env_histogram(env, simulate_values(params, env, supertype, n_episodes, seed))


def cell_seed(seed: int, repetition: int, cell) -> int:
    ss = np.random.SeedSequence([seed, repetition, round(cell[0] * 1e6), round(cell[1] * 1e6)])
    return int(ss.generate_state(1)[0])


def _ckpt_path(cache_dir, env_name, cell, seed, budget, env_overrides):
    # the digest keeps checkpoints from different budgets or env configs apart
    key = json.dumps([dataclasses.asdict(budget.training), env_overrides], sort_keys=True)
    tag = hashlib.sha1(key.encode()).hexdigest()[:8]
    return Path(cache_dir) / f"{env_name}_mu{cell[0]:g}_ss{cell[1]:g}_seed{seed}_{tag}.ckpt"


def train_cell(env_name: str, env_overrides: dict, cell, seed: int, budget: Budget,
               cache_dir=None) -> tuple[np.ndarray | None, str | None]:
    """Train (or load) the policy of one cell and return its simulated histogram.

    A diverged training run is logged and reported as a ``None`` histogram so the
    rest of the grid can continue.
    """
    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

    env = make_env(env_name, env_overrides)
    st = Supertype(*cell)
    path = _ckpt_path(cache_dir, env_name, cell, seed, budget, env_overrides) if cache_dir else None
    params = None
    if path is not None and path.exists():
        params = load_checkpoint(path).params
    if params is None:
        cfg = budget.training.replace(seed=seed)
        try:
            res = train(env, st, cfg)
        except TrainingDivergedError as exc:
            log.warning("cell mu=%g sigma*=%g failed: %s", cell[0], cell[1], exc)
            return None, None
        params = res.params
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            meta = {"critic_return_mean": res.value.ret_mean, "critic_return_var": res.value.ret_var}
            save_checkpoint(path, Checkpoint(env_name, env_overrides, st, res.config, res.params,
                                             res.value.params, meta))
    hist = simulate_distribution(params, env, st, budget.sim_episodes, seed)
    return hist, (str(path) if path is not None else None)


def _train_cell_job(args):
    return train_cell(*args)


def simulate_grid(env_name: str, env_overrides: dict, grid: Grid, budget: Budget, seed: int,
                  repetitions=range(REPETITIONS), jobs: int = 1, cache_dir=None) -> dict:
    """Simulated histogram for every ``(repetition, cell)``, keyed by that pair."""
    keys = [(r, cell) for r in repetitions for cell in grid.cells()]
    args = [(env_name, env_overrides, cell, cell_seed(seed, r, cell), budget, cache_dir) for r, cell in keys]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_train_cell_job, args))
    else:
        outs = [_train_cell_job(a) for a in args]
    return {k: (o[0], o[1], a[3]) for k, o, a in zip(keys, outs, args)}


# ----------------------------------------------------------------- grid search


@dataclass
class CellResult:
    mu: float
    sigma_star: float
    train_mse: float
    test_rmse: float
    repetition: int = 0
    fold: int = 0
    seed: int = 0
    checkpoint: str | None = None
    selected: bool = False

    def __post_init__(self):
        if self.train_mse < 0:
            raise ValueError("mse must be non-negative")

    @property
    def cell(self):
        return (self.mu, self.sigma_star)


def select_best(results: list[CellResult]) -> CellResult:
    """Lowest train MSE; ties go to the smaller ``mu`` then the smaller ``sigma_star``."""
    ok = [r for r in results if math.isfinite(r.train_mse)]
    if not ok:
        raise RuntimeError("no grid cell completed")
    return min(ok, key=lambda r: (r.train_mse, r.mu, r.sigma_star))


def score_grid(train_hist: np.ndarray, sim_hists: dict, grid: Grid) -> tuple[tuple[float, float], dict]:
    """Score every completed cell against the training histogram.

    ``sim_hists`` maps cell -> simulated histogram (``None`` marks a failed cell,
    which is skipped).  Returns ``(best cell, {cell: train MSE})``.
    """
    scores = {cell: mse(sim_hists[cell], train_hist) for cell in grid.cells()
              if sim_hists.get(cell) is not None}
    if not scores:
        raise RuntimeError("no grid cell completed")
    best = min(scores, key=lambda c: (scores[c], c[0], c[1]))
    return best, scores


def grid_search(env_name: str, train_values, grid: Grid = Grid(), budget: Budget = Budget(), seed: int = 0,
                repetition: int = 0, env_overrides: dict | None = None, jobs: int = 1,
                cache_dir=None) -> tuple[tuple[float, float], list[CellResult]]:
    """Train every cell, score it on ``train_values`` and return the lowest-MSE cell.

    ``test_rmse`` of the returned results is left as NaN; see :func:`evaluate`.
    """
    env_overrides = dict(env_overrides or {})
    env = make_env(env_name, env_overrides)
    train_hist = env_histogram(env, train_values)
    sims = simulate_grid(env_name, env_overrides, grid, budget, seed, [repetition], jobs, cache_dir)
    best, scores = score_grid(train_hist, {c: sims[(repetition, c)][0] for c in grid.cells()}, grid)
    results = [CellResult(c[0], c[1], scores.get(c, math.nan), math.nan, repetition, 0, sims[(repetition, c)][2],
                          sims[(repetition, c)][1], selected=c == best) for c in grid.cells()]
    return best, results


def evaluate(sim_hist: np.ndarray, dataset: EmpiricalDataset, env: Environment,
             train_idx, test_idx) -> float:
    """Held-out RMSE of one cell; only rows in ``test_idx`` are read."""
    if np.intersect1d(train_idx, test_idx).size:
        raise FoldOverlapError("train and test folds share observations")
    test = dataset.values[np.asarray(test_idx, dtype=int)]
    return rmse(sim_hist, env_histogram(env, test))


@dataclass
class CalibrationReport:
    env: str
    grid: Grid
    cells: list[CellResult]
    selections: list[CellResult] = field(default_factory=list)

    @property
    def test_rmses(self) -> np.ndarray:
        return np.array([s.test_rmse for s in self.selections])

    def summary(self) -> dict:
        t = self.test_rmses
        return {"env": self.env, "model": "proposed", "folds": len(t),
                "rmse_mean": float(t.mean()), "rmse_std": float(t.std(ddof=1)) if len(t) > 1 else 0.0}


def run_calibration(dataset: EmpiricalDataset, env_name: str | None = None, grid: Grid = Grid(),
                    budget: Budget = Budget(), seed: int = 0, env_overrides: dict | None = None,
                    jobs: int = 1, cache_dir=None) -> CalibrationReport:
    """Full 5x2 protocol: per repetition one policy per cell, two train/test swaps."""
    env_name = env_name or dataset.env
    env_overrides = dict(env_overrides or {})
    env = make_env(env_name, env_overrides)
    bin_indices(dataset.values, env.space, clip=env.kind == "cobweb")   # reject off-grid data early
    plan = split_5x2(len(dataset), seed)
    sims = simulate_grid(env_name, env_overrides, grid, budget, seed, range(len(plan.halves)), jobs, cache_dir)
    cells, selections = [], []
    for r, fold, tr, te in plan.folds():
        train_hist = env_histogram(env, dataset.values[tr])
        hists = {cell: sims[(r, cell)][0] for cell in grid.cells()}
        best, scores = score_grid(train_hist, hists, grid)
        for cell in grid.cells():
            hist, ckpt, cseed = sims[(r, cell)]
            test = math.nan if hist is None else evaluate(hist, dataset, env, tr, te)
            cr = CellResult(cell[0], cell[1], scores.get(cell, math.nan), test,
                            r, fold, cseed, ckpt, selected=cell == best)
            cells.append(cr)
            if cr.selected:
                selections.append(cr)
    return CalibrationReport(env_name, grid, cells, selections)


CELL_COLUMNS = ("repetition", "fold", "mu", "sigma_star", "train_mse", "test_rmse", "selected", "seed", "checkpoint")


def write_cell_results(path, results: list[CellResult]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_COLUMNS)
        for c in results:
            w.writerow([c.repetition, c.fold, repr(c.mu), repr(c.sigma_star), repr(c.train_mse),
                        repr(c.test_rmse), int(c.selected), c.seed, os.path.basename(c.checkpoint or "")])


# ---------------------------------------------------------------------- ranks


@dataclass
class RankTable:
    envs: list[str]
    models: list[str]
    means: np.ndarray     # (envs, models)
    stds: np.ndarray
    ranks: np.ndarray
    weights: np.ndarray
    average: np.ndarray   # (models,)

    def render(self) -> str:
        """Aligned text: ``mean ± std (rank)`` per cell, weighted average rank last."""
        def cell(m, s, r):
            sd = "< 0.001" if s < 0.001 else f"{s:.3f}"
            return f"{m:.2f} ± {sd} ({r:g})"

        rows = [[""] + self.models]
        for e, env in enumerate(self.envs):
            rows.append([env] + [cell(self.means[e, k], self.stds[e, k], self.ranks[e, k])
                                 for k in range(len(self.models))])
        rows.append(["Rank"] + [f"{a:g}" for a in self.average])
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["env", "model", "rmse_mean", "rmse_std", "rank", "weight"])
            for e, env in enumerate(self.envs):
                for k, m in enumerate(self.models):
                    w.writerow([env, m, repr(float(self.means[e, k])), repr(float(self.stds[e, k])),
                                repr(float(self.ranks[e, k])), repr(float(self.weights[e]))])
            for k, m in enumerate(self.models):
                w.writerow(["average", m, "", "", repr(float(self.average[k])), ""])


def rank_models(means: dict[str, dict[str, float]], weights: dict[str, float] | None = None,
                stds: dict[str, dict[str, float]] | None = None) -> RankTable:
    """Rank models within each environment (lowest RMSE = 1, ties averaged) and
    combine the ranks with per-environment weights.

    Raises:
        ValueError: fewer than one environment, a missing (env, model) cell, or a
            weight outside ``(0, 1]``.
    """
    envs = list(means)
    if not envs:
        raise ValueError("need at least one environment")
    models = list(means[envs[0]])
    for env in envs:
        if set(means[env]) != set(models):
            raise ValueError(f"environment {env!r} is missing cells: has {sorted(means[env])}, need {models}")
    w = np.array([1.0 if weights is None else weights.get(env, 1.0) for env in envs], dtype=float)
    if weights is not None:
        if set(weights) - set(envs):
            raise ValueError(f"weights for unknown environments: {sorted(set(weights) - set(envs))}")
        if np.any(~np.isfinite(w)) or np.any(w <= 0) or np.any(w > 1):
            raise ValueError("weights must be normalised to (0, 1]")
    m = np.array([[float(means[env][k]) for k in models] for env in envs])
    if not np.all(np.isfinite(m)):
        raise ValueError("RMSE cells must be finite")
    s = np.array([[float((stds or {}).get(env, {}).get(k, 0.0)) for k in models] for env in envs])
    ranks = np.vstack([rankdata(row, method="average") for row in m])
    avg = (w[:, None] * ranks).sum(axis=0) / w.sum()
    return RankTable(envs, models, m, s, ranks, w, avg)


# -------------------------------------------------------------- synthetic data


def generate_dataset(env_name: str, params: PolicyParameters, supertype: Supertype, n_subjects: int,
                     n_rounds: int, seed: int, env_overrides: dict | None = None) -> EmpiricalDataset:
    """Simulated lab session with a frozen policy.

    Subjects keep one processing cost for the whole session.  One-shot games
    re-pair subjects at random every round; in the cobweb each group of
    ``producers`` subjects forms one market whose realised price is recorded for
    ``horizon`` rounds (``subject`` is then the market id).
    """
    from .core import sample_lambda

    env = make_env(env_name, env_overrides)
    n = env.n_agents
    if n_subjects % n:
        raise ValueError(f"n_subjects must be a multiple of the group size {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    lam = sample_lambda(supertype, rng, size=n_subjects)
    subjects, rounds, values = [], [], []
    if env.kind == "cobweb":
        groups = rng.permutation(n_subjects).reshape(-1, n)
        _, ro = run_episodes(env, params, supertype, len(groups), rng, lams=lam[groups])
        for g in range(len(groups)):
            for t in range(env.horizon):
                subjects.append(f"m{g}")
                rounds.append(t)
                values.append(round(float(ro.price[g, t]), 6))
        return EmpiricalDataset(env_name, subjects, rounds, values)
    for t in range(n_rounds):
        groups = rng.permutation(n_subjects).reshape(-1, n)
        _, ro = run_episodes(env, params, supertype, len(groups), rng, lams=lam[groups])
        vals = env.space.values[ro.actions[:, 0, :]]
        for g, members in enumerate(groups):
            for k, subj in enumerate(members):
                subjects.append(f"s{subj}")
                rounds.append(t)
                values.append(float(vals[g, k]))
    return EmpiricalDataset(env_name, subjects, rounds, values)


def equilibrium_dataset(env_name: str, value: float, n_subjects: int, n_rounds: int) -> EmpiricalDataset:
    """Every subject plays ``value`` in every round (a degenerate Nash dataset)."""
    subjects = [f"s{i}" for _ in range(n_rounds) for i in range(n_subjects)]
    rounds = [t for t in range(n_rounds) for _ in range(n_subjects)]
    return EmpiricalDataset(env_name, subjects, rounds, [value] * len(subjects))
