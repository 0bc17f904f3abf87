"""Experiment harness and command-line front end.

Subcommands ``factor-ring``, ``sbn`` and ``vae`` run every (seed, grid cell)
combination of a configuration and write, per run, a JSON-lines trajectory
and a JSON summary, plus one sweep CSV per invocation. ``report`` collects
summaries and selects the best grid cell per method.

A configuration file holds flat ``key = value`` lines whose keys are the
long flag names; flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .data import binary_mnist, synth_factor_data
from .evaluation import is_marginal_likelihood, validation_elbo
from .exceptions import ConfigurationError
from .factor import BernoulliFactorVI, FactorModel, permutation_rmse, ring_init
from .records import RunRecord, config_hash
from .sbn import SigmoidBeliefNet
from .vae import VariationalAutoencoder

EXPERIMENTS = ("factor-ring", "sbn", "vae")

METHODS = {
    "factor-ring": ("vi", "pvi-fast", "pvi-inner", "annealing"),
    "sbn": ("vi", "pvi-fast", "annealing"),
    "vae": ("vi", "pvi-fast"),
}

STATISTICS = {
    "factor-ring": ("identity", "entropy", "kl", "mean-variance"),
    "sbn": ("entropy", "kl", "mean-variance"),
    "vae": ("orthogonal",),
}

DEFAULTS = {
    "factor-ring": {"statistic": "entropy", "rho": 0.05, "iters": 3000, "gamma": (1e-10,),
                    "schedule": "exponential", "k0": ("auto",)},
    "sbn": {"statistic": "entropy", "rho": 1e-3, "iters": 20000, "gamma": (1e-5,),
            "schedule": "exponential", "k0": ("auto",)},
    "vae": {"statistic": "orthogonal", "rho": 1e-3, "iters": 5000, "gamma": (1.0,),
            "schedule": "constant", "k0": (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)},
}

# Ring experiment: two features at the upper corners of a square, initialized on a ring.
RING_TRUTH = ((2.0, 2.0), (-2.0, 2.0))
RING_PRIOR = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a sweep, apart from where it is written.

    ``k0`` and ``gamma`` are grids; their product gives the grid cells. Each
    cell is run once per seed. For ``factor-ring`` a seed fixes the data set
    and each of the ``runs`` ring initializations uses ``seed + run_index``.
    """

    experiment: str
    method: str = "vi"
    statistic: Optional[str] = None
    distance: str = "inverse-huber"
    k0: tuple = ()
    gamma: tuple = ()
    alpha: float = 0.9999
    rho: Optional[float] = None
    iters: Optional[int] = None
    batch: int = 20
    seeds: tuple = (0,)
    init: str = "good"
    inner_iters: int = 50
    noise_std: float = 1e-2
    schedule: Optional[str] = None
    log_every: int = 100
    # factor-ring
    runs: int = 100
    radius: float = 12.0
    jitter: float = 0.02
    n_points: int = 100
    # image models
    n_train: int = 1000
    n_validation: int = 500
    is_samples: int = 1000
    elbo_samples: int = 10
    # sbn
    hidden_sizes: tuple = (20,)
    prior: Optional[float] = None
    bad_weight: float = -10.0
    n_samples: int = 5
    # vae
    hidden: int = 64
    latent: int = 8
    anchor: str = "ema"
    out: str = field(default="runs", compare=False)

    def resolved(self) -> "ExperimentConfig":
        """Fill experiment-specific defaults for unset fields."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}")
        d = DEFAULTS[self.experiment]
        updates = {key: d[key] for key in d if getattr(self, key) in (None, ())}
        if self.method == "vi" and not self.k0:
            # plain VI ignores the magnitude, so a default grid would only repeat it
            updates["k0"] = d["k0"][:1]
        if self.prior is None:
            updates["prior"] = 0.001 if self.init == "bad" else (
                RING_PRIOR if self.experiment == "factor-ring" else 0.5)
        cfg = replace(self, **updates)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        exp = self.experiment
        if self.method not in METHODS[exp]:
            raise ConfigurationError(
                f"method {self.method!r} is not available for {exp}; choose from {METHODS[exp]}"
            )
        if self.method == "pvi-fast" or self.method == "pvi-inner":
            if self.statistic not in STATISTICS[exp]:
                raise ConfigurationError(
                    f"statistic {self.statistic!r} is not defined for {exp}; "
                    f"choose from {STATISTICS[exp]}"
                )
        if not self.k0 or not self.gamma:
            raise ConfigurationError("the k0 and gamma grids must be nonempty")
        for k in self.k0:
            if k != "auto" and not (isinstance(k, (int, float)) and k >= 0):
                raise ConfigurationError(f"k0 must be 'auto' or >= 0, got {k!r}")
        if any(not 0 < g <= 1 for g in self.gamma):
            raise ConfigurationError("gamma values must lie in (0, 1]")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be nonempty and distinct")
        if self.init not in ("good", "bad"):
            raise ConfigurationError(f"init must be 'good' or 'bad', got {self.init!r}")
        if self.iters < 1 or self.runs < 1 or self.batch < 1:
            raise ConfigurationError("iters, runs and batch must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")

    def cells(self):
        """Grid cells ``(k0, gamma)`` in a fixed order."""
        return list(itertools.product(self.k0, self.gamma))

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d


def _cell_config(cfg: ExperimentConfig, k0, gamma) -> dict:
    d = cfg.as_dict()
    d.pop("seeds")
    d["k0"] = k0
    d["gamma"] = gamma
    return d


def _enumerated_log_marginal(model: FactorModel, X) -> np.ndarray:
    """Exact ``log p(x_i)`` of the factor model by summing over all 2^K codes."""
    K, D = model.K, model.D
    codes = np.array(list(itertools.product((0.0, 1.0), repeat=K)))
    log_prior = codes.sum(1) * np.log(model.pi) + (K - codes.sum(1)) * np.log1p(-model.pi)
    means = codes @ model.mu
    sq = ((X[:, None, :] - means[None]) ** 2).sum(-1)
    log_lik = -0.5 * sq / model.sigma2 - 0.5 * D * np.log(2 * np.pi * model.sigma2)
    return logsumexp(log_lik + log_prior, axis=1)


def ring_data(seed: int, n_points: int = 100):
    """Synthetic factor-model data for the ring experiment."""
    truth = np.array(RING_TRUTH)
    X, _ = synth_factor_data(truth, RING_PRIOR, 1.0, n_points, np.random.default_rng(seed))
    return X, truth


def _run_factor(cfg, k0, gamma, seed, run_index, data):
    X, truth = data
    run_seed = seed + run_index
    mu0 = ring_init(truth, cfg.radius, run_index, cfg.runs,
                    np.random.RandomState(run_seed), jitter=cfg.jitter)
    est = BernoulliFactorVI(
        n_components=truth.shape[0], prior=cfg.prior, method=cfg.method,
        statistic=cfg.statistic, distance=cfg.distance, k0=k0, gamma=gamma,
        schedule=cfg.schedule, ema_alpha=cfg.alpha, step_size=cfg.rho, n_iter=cfg.iters,
        noise_std=cfg.noise_std, inner_iters=cfg.inner_iters, init_means=mu0,
        log_every=cfg.log_every, random_state=run_seed,
    ).fit(X)
    fitted = est._model()
    summary = {
        "run_index": run_index,
        "rmse": permutation_rmse(est.components_, truth),
        "truth": truth,
        "init_means": mu0,
        "means": est.components_,
        "validation_elbo": est.elbo_ / X.shape[0],
        "marginal_likelihood": float(_enumerated_log_marginal(fitted, X).mean()),
        "initial_elbo": est.initial_elbo_,
        "k0": getattr(est, "k0_", getattr(est, "temperature0_", 0.0)),
    }
    return est.history_, summary


def _evaluate_images(cfg, est, X_val, seed):
    return {
        "validation_elbo": validation_elbo(est, X_val, cfg.elbo_samples,
                                           np.random.default_rng([seed, 3])),
        "marginal_likelihood": is_marginal_likelihood(est, X_val, cfg.is_samples,
                                                      np.random.default_rng([seed, 4])),
        "initial_elbo": est.initial_elbo_,
        "k0": est.k0_,
    }


def _run_sbn(cfg, k0, gamma, seed, run_index, data):
    X_train, X_val = data
    est = SigmoidBeliefNet(
        hidden_sizes=tuple(cfg.hidden_sizes), prior=cfg.prior, init=cfg.init,
        bad_weight=cfg.bad_weight, method=cfg.method, statistic=cfg.statistic,
        distance=cfg.distance, k0=k0, gamma=gamma, schedule=cfg.schedule,
        ema_alpha=cfg.alpha, step_size=cfg.rho, n_iter=cfg.iters, batch_size=cfg.batch,
        n_samples=cfg.n_samples, log_every=cfg.log_every, random_state=seed,
    ).fit(X_train)
    return est.history_, _evaluate_images(cfg, est, X_val, seed)


def _run_vae(cfg, k0, gamma, seed, run_index, data):
    X_train, X_val = data
    est = VariationalAutoencoder(
        hidden=cfg.hidden, latent=cfg.latent, method=cfg.method, k0=k0,
        distance=cfg.distance, ema_alpha=cfg.alpha, anchor=cfg.anchor, step_size=cfg.rho,
        n_iter=cfg.iters, batch_size=cfg.batch, log_every=cfg.log_every, random_state=seed,
    ).fit(X_train)
    return est.history_, _evaluate_images(cfg, est, X_val, seed)


def _load_data(cfg, seed):
    if cfg.experiment == "factor-ring":
        return ring_data(seed, cfg.n_points)
    factor = 2 if cfg.experiment == "vae" else 1
    return binary_mnist(cfg.n_train, cfg.n_validation, downsample_factor=factor)


_RUNNERS = {"factor-ring": _run_factor, "sbn": _run_sbn, "vae": _run_vae}

SWEEP_COLUMNS = ("experiment", "method", "statistic", "init", "seed", "run_index", "k0",
                 "gamma", "resolved_k0", "validation_elbo", "marginal_likelihood", "rmse",
                 "config_hash")


def run(config: ExperimentConfig, write: bool = True, progress=None) -> list:
    """Run every (seed, grid cell) of ``config``; return the RunRecords.

    Configuration errors are raised before any computation. With
    ``write=True`` each record goes to ``<out>/<experiment>-<method>-<hash>``
    and a sweep CSV summarizing all runs is written next to them.
    """
    cfg = config.resolved()
    runner = _RUNNERS[cfg.experiment]
    run_indices = range(cfg.runs) if cfg.experiment == "factor-ring" else (0,)
    records = []
    data_cache = {}
    for seed in cfg.seeds:
        key = seed if cfg.experiment == "factor-ring" else None
        if key not in data_cache:
            data_cache.clear()
            data_cache[key] = _load_data(cfg, seed)
        for k0, gamma in cfg.cells():
            cell = _cell_config(cfg, k0, gamma)
            for run_index in run_indices:
                rows, summary = runner(cfg, k0, gamma, seed, run_index, data_cache[key])
                run_seed = seed + run_index
                digest = config_hash(cell, run_seed)
                summary = {
                    "config": cell,
                    "config_hash": digest,
                    "experiment": cfg.experiment,
                    "method": cfg.method,
                    "statistic": cfg.statistic,
                    "init": cfg.init,
                    "seed": seed,
                    "gamma": gamma,
                    "resolved_k0": summary.pop("k0"),
                    "k0": k0,
                    "rmse": None,
                    **summary,
                }
                record = RunRecord(rows, summary)
                records.append(record)
                if write:
                    record.write(cfg.out, f"{cfg.experiment}-{cfg.method}-{digest}")
                if progress is not None:
                    progress(record)
    if write:
        sweep_hash = config_hash(cfg.as_dict(), cfg.seeds[0])
        write_csv(Path(cfg.out) / f"sweep-{cfg.experiment}-{cfg.method}-{sweep_hash}.csv",
                  [r.summary for r in records], SWEEP_COLUMNS)
    return records


def write_csv(path, rows, columns) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _csv_value(row.get(c)) for c in columns})


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _k0_key(k0):
    return -1.0 if k0 == "auto" else float(k0)


def sweep_report(summaries) -> list:
    """Best grid cell per method and initialization.

    Summaries sharing method, statistic, init, k0 and gamma form one cell;
    its scores are averaged over seeds and ring runs. The cell with the
    highest mean validation ELBO wins; ties go to the smallest k0 (``"auto"``
    first), then the smallest gamma. Returns one row per method with columns
    ``elbo_<init>`` and ``marginal_likelihood_<init>`` for each init seen.
    """
    cells = {}
    for s in summaries:
        key = (s["method"], s.get("statistic"), s.get("init", "good"), s["k0"], s["gamma"])
        cells.setdefault(key, []).append(s)
    best = {}
    for (method, stat, init, k0, gamma), members in cells.items():
        elbo = float(np.mean([m["validation_elbo"] for m in members]))
        ml = float(np.mean([m["marginal_likelihood"] for m in members]))
        rmses = [m["rmse"] for m in members if m.get("rmse") is not None]
        entry = {"statistic": stat, "k0": k0, "gamma": gamma, "elbo": elbo,
                 "marginal_likelihood": ml, "n_runs": len(members),
                 "median_rmse": float(np.median(rmses)) if rmses else None}
        current = best.get((method, init))
        rank = (-elbo, _k0_key(k0), gamma)
        if current is None or rank < current[0]:
            best[(method, init)] = (rank, entry)
    table = {}
    for (method, init), (_, entry) in sorted(best.items()):
        row = table.setdefault(method, {"method": method})
        for name, value in entry.items():
            row[f"{name}_{init}"] = value
    return list(table.values())


def report_columns(rows) -> list:
    cols = ["method"]
    for row in rows:
        cols.extend(c for c in row if c not in cols)
    return cols


def load_summaries(paths) -> list:
    """Read every run summary (``*.json``) under the given files or directories."""
    import json

    out = []
    for p in map(Path, paths):
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            out.append(json.loads(f.read_text()))
    return out


# ---------------------------------------------------------------------------
# command line

def _k0_value(text: str):
    if text == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"k0 must be 'auto' or a number, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError("k0 must be nonnegative")
    return value


def _add_run_flags(p: argparse.ArgumentParser, experiment: str) -> None:
    p.add_argument("--config", help="flat key = value file; flags on the command line win")
    p.add_argument("--method", default="vi", choices=METHODS[experiment])
    p.add_argument("--statistic", help=f"proximity statistic (default "
                                       f"{DEFAULTS[experiment]['statistic']})")
    p.add_argument("--distance", default="inverse-huber",
                   choices=("inverse-huber", "squared-difference"))
    p.add_argument("--k0", nargs="+", type=_k0_value, help="magnitude grid, or 'auto'")
    p.add_argument("--gamma", nargs="+", type=float, help="decay-rate grid")
    p.add_argument("--alpha", type=float, default=0.9999, help="EMA decay of the anchor")
    p.add_argument("--rho", type=float, help="step size")
    p.add_argument("--iters", type=int, help="iterations T")
    p.add_argument("--batch", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--replicates", type=int, default=1,
                   help="number of seeds, derived as base seed + replicate index")
    p.add_argument("--seeds", type=int, nargs="+", help="explicit seeds (overrides --seed)")
    p.add_argument("--init", default="good", choices=("good", "bad"))
    p.add_argument("--inner-iters", type=int, default=50)
    p.add_argument("--noise-std", type=float, default=1e-2)
    p.add_argument("--schedule", choices=("constant", "exponential", "linear"))
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--out", default="runs", help="output directory")
    if experiment == "factor-ring":
        p.add_argument("--runs", type=int, default=100, help="ring initializations")
        p.add_argument("--radius", type=float, default=12.0)
        p.add_argument("--jitter", type=float, default=0.02, help="angular jitter (radians)")
        p.add_argument("--n-points", type=int, default=100)
    else:
        p.add_argument("--n-train", type=int, default=1000)
        p.add_argument("--n-validation", type=int, default=500)
        p.add_argument("--is-samples", type=int, default=1000)
        p.add_argument("--elbo-samples", type=int, default=10)
    if experiment == "sbn":
        p.add_argument("--hidden-sizes", type=int, nargs="+", default=[20])
        p.add_argument("--prior", type=float, help="prior probability (bad init: 0.001)")
        p.add_argument("--bad-weight", type=float, default=-10.0)
        p.add_argument("--n-samples", type=int, default=5)
    if experiment == "vae":
        p.add_argument("--hidden", type=int, default=64)
        p.add_argument("--latent", type=int, default=8)
        p.add_argument("--anchor", default="ema", choices=("ema", "identity"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxvi",
                                     description="Proximity variational inference experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for experiment in EXPERIMENTS:
        _add_run_flags(sub.add_parser(experiment, help=f"run the {experiment} experiment"),
                       experiment)
    rep = sub.add_parser("report", help="best-per-method table from run summaries")
    rep.add_argument("paths", nargs="+", help="summary files or output directories")
    rep.add_argument("--out", help="CSV file for the table (printed to stdout otherwise)")
    return parser


def read_config_file(path) -> list:
    """Turn ``key = value`` lines into command-line tokens.

    Blank lines and ``#`` comments are skipped; a value may hold several
    whitespace- or comma-separated items for grid flags.
    """
    tokens = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "config":
            raise ConfigurationError(f"{path}:{lineno}: config files cannot include others")
        tokens.append("--" + key.replace("_", "-"))
        tokens.extend(value.replace(",", " ").split())
    return tokens


def _expand_config(argv: list) -> list:
    """Splice config-file tokens in front of the explicit flags so the flags win."""
    if len(argv) < 2 or "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv
    path = argv[i + 1]
    rest = argv[1:i] + argv[i + 2 :]
    return [argv[0]] + read_config_file(path) + rest


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    seeds = tuple(args.seeds) if args.seeds else tuple(
        args.seed + i for i in range(args.replicates))
    kwargs = dict(
        experiment=args.command, method=args.method, statistic=args.statistic,
        distance=args.distance, k0=tuple(args.k0 or ()), gamma=tuple(args.gamma or ()),
        alpha=args.alpha, rho=args.rho, iters=args.iters, batch=args.batch, seeds=seeds,
        init=args.init, inner_iters=args.inner_iters, noise_std=args.noise_std,
        schedule=args.schedule, log_every=args.log_every, out=args.out,
    )
    for name in ("runs", "radius", "jitter", "n_points", "n_train", "n_validation",
                 "is_samples", "elbo_samples", "prior", "bad_weight", "n_samples",
                 "hidden", "latent", "anchor"):
        if hasattr(args, name):
            kwargs[name] = getattr(args, name)
    if hasattr(args, "hidden_sizes"):
        kwargs["hidden_sizes"] = tuple(args.hidden_sizes)
    return ExperimentConfig(**kwargs)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_expand_config(argv))
        if args.command == "report":
            rows = sweep_report(load_summaries(args.paths))
            cols = report_columns(rows)
            if args.out:
                write_csv(args.out, rows, cols)
            else:
                writer = csv.DictWriter(sys.stdout, fieldnames=cols, extrasaction="ignore")
                writer.writeheader()
                for row in rows:
                    writer.writerow({c: _csv_value(row.get(c)) for c in cols})
            return 0
        config = config_from_args(args)

        def progress(record):
            s = record.summary
            print(f"{s['experiment']} {s['method']} seed={s['seed']} k0={s['k0']} "
                  f"gamma={s['gamma']} elbo={s['validation_elbo']:.4f} "
                  f"hash={s['config_hash']}", flush=True)

        run(config, progress=progress)
    except ConfigurationError as err:
        parser.exit(2, f"proxvi: configuration error: {err}\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
