"""
Synthetic mixed-type longitudinal data and the simulation-study harness.

Units are drawn from a matrix-normal mixture on the latent scale, optionally
perturbed by extra Gaussian noise, and then mapped to the observed scale:
continuous rows are kept, categorical rows are cut at their thresholds and
count rows are Poisson with log-rate equal to the latent value.
"""

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .em import LatentData, MMMParams, e_step, fit
from .errors import FitFailedError, NumericalError, SelectionError, ShapeError, ValidationError
from .matnorm import MatNormParams, cholesky, sample_matnorm
from .mmn import fit_mmn
from .samplers import stream
from .schema import MixedDataset, Schema, discretize, thresholds_for
from .selection import ari, mape_blocks, select_k

log = logging.getLogger(__name__)

_KEY_GENERATE = 10
_KEY_NOISE = 11
_KEY_BAYES = 12


@dataclass(eq=False)
class GenConfig:
    """Generator settings; ``means``, ``phi`` and ``sigma`` are stacked over clusters."""

    N: int
    schema: Schema
    pi: np.ndarray
    means: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    noise_fraction: float = 0.0
    noise_var: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.validate()

    @property
    def K(self):
        return self.pi.size

    @property
    def T(self):
        return self.means.shape[2]

    @property
    def latent_schema(self):
        return self.schema.expanded()[0]

    def validate(self):
        if self.N < 1:
            raise ValidationError("N must be positive")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValidationError(f"noise fraction must lie in [0, 1), got {self.noise_fraction}")
        if self.noise_var <= 0:
            raise ValidationError("noise variance must be positive")
        if np.any(self.pi <= 0) or abs(self.pi.sum() - 1.0) > 1e-10:
            raise ValidationError("pi must be positive and sum to 1")
        K, J = self.pi.size, self.latent_schema.J
        if self.means.ndim != 3 or self.means.shape[:2] != (K, J):
            raise ShapeError(f"means must be (K={K}, J={J}, T), got {self.means.shape}")
        T = self.means.shape[2]
        if self.phi.shape != (K, T, T) or self.sigma.shape != (K, J, J):
            raise ShapeError("phi and sigma must be stacked (K, T, T) and (K, J, J)")
        for k in range(K):
            cholesky(self.phi[k], "phi")
            cholesky(self.sigma[k], "sigma")

    @property
    def params(self):
        return MMMParams(self.pi, self.means, self.phi, self.sigma)

    def to_dict(self):
        return {
            "N": int(self.N),
            "schema": {"variables": self.schema.to_list()},
            "pi": self.pi.tolist(),
            "means": self.means.tolist(),
            "phi": self.phi.tolist(),
            "sigma": self.sigma.tolist(),
            "noise_fraction": float(self.noise_fraction),
            "noise_var": float(self.noise_var),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            N=int(d["N"]),
            schema=Schema.from_list(d["schema"]["variables"]),
            pi=d["pi"],
            means=d["means"],
            phi=d["phi"],
            sigma=d["sigma"],
            noise_fraction=float(d.get("noise_fraction", 0.0)),
            noise_var=float(d.get("noise_var", 0.5)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(eq=False)
class GroundTruth:
    labels: np.ndarray  # 1-based
    latent: np.ndarray  # (N, J_latent, T), after noise
    params: MMMParams
    noisy_units: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def benchmark_config(n=500, noise=0.0, seed=0):
    """Two clusters of four variables (continuous, 5-level ordinal, binary, count) over three times."""
    schema = Schema.from_list([
        {"name": "V1", "kind": "continuous"},
        {"name": "V2", "kind": "ordinal", "levels": 5},
        {"name": "V3", "kind": "binary"},
        {"name": "V4", "kind": "count"},
    ])
    T = 3
    rows = np.array([[1.75, 1.75, -0.25, 1.0], [2.75, 2.75, 0.25, 2.5]])
    means = np.repeat(rows[:, :, None], T, axis=2)
    return GenConfig(
        N=n,
        schema=schema,
        pi=np.array([0.6, 0.4]),
        means=means,
        phi=np.repeat(np.eye(T)[None], 2, axis=0),
        sigma=np.repeat(np.eye(4)[None], 2, axis=0),
        noise_fraction=noise,
        noise_var=0.5,
        seed=seed,
    )


SCENARIOS = {"paper-4.1": benchmark_config}


def inject_noise(latent, tau, noise_var, labels, rng):
    """Add ``N(0, noise_var)`` to every entry of ``floor(tau * N_k)`` units of each cluster.

    Units are picked uniformly within their cluster. Returns the perturbed
    copy and the sorted indices of the perturbed units.
    """
    if not 0.0 <= tau < 1.0:
        raise ValidationError(f"noise fraction must lie in [0, 1), got {tau}")
    out = np.array(latent, dtype=float, copy=True)
    labels = np.asarray(labels)
    chosen = []
    for k in np.unique(labels):
        members = np.flatnonzero(labels == k)
        n_noisy = math.floor(tau * members.size)
        if n_noisy:
            chosen.append(rng.choice(members, size=n_noisy, replace=False))
    noisy = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=int)
    if noisy.size:
        out[noisy] += rng.normal(0.0, math.sqrt(noise_var), size=out[noisy].shape)
    return out, noisy


def generate(cfg, rng=None):
    """Draw a dataset and its ground truth from ``cfg``.

    Without ``rng`` the stream is derived from ``cfg.seed``.
    """
    cfg.validate()
    rng = rng if rng is not None else stream(cfg.seed, _KEY_GENERATE)
    latent_schema, sources = cfg.schema.expanded()
    N, K, T = cfg.N, cfg.K, cfg.T
    labels = rng.choice(K, size=N, p=cfg.pi)
    latent = np.empty((N, latent_schema.J, T))
    for k in range(K):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            latent[idx] = sample_matnorm(MatNormParams(cfg.means[k], cfg.phi[k], cfg.sigma[k]), rng, idx.size)
    latent, noisy = inject_noise(latent, cfg.noise_fraction, cfg.noise_var, labels + 1, rng)

    values = np.empty((N, cfg.schema.J, T))
    for j, v in enumerate(cfg.schema.variables):
        rows = [r for r, (src, _) in enumerate(sources) if src == j]
        if v.kind == "continuous":
            values[:, j] = latent[:, rows[0]]
        elif v.kind in ("ordinal", "binary"):
            values[:, j] = discretize(latent[:, rows[0]], thresholds_for(v))
        elif v.kind == "count":
            values[:, j] = rng.poisson(np.exp(latent[:, rows[0]]))
        else:
            # reference level unless some indicator is positive; the largest one wins
            z = latent[:, rows]
            best = np.argmax(z, axis=1)
            values[:, j] = np.where(np.max(z, axis=1) > 0, best + 2, 1)
    ds = MixedDataset(cfg.schema, values)
    truth = GroundTruth(labels=labels + 1, latent=latent, params=cfg.params, noisy_units=noisy)
    return ds, truth


def bayes_reference_ari(ds, truth, config=None, seed=0):
    """ARI of the argmax of one E-step run at the true parameters."""
    config = config or RunConfig()
    stats = e_step(truth.params, LatentData(ds), config.mcmc, seed, (_KEY_BAYES, 0), config.threads)
    return ari(truth.labels, np.argmax(stats.tau, axis=1) + 1)


@dataclass
class Scenario:
    name: str = "paper-4.1"
    N: tuple = (500,)
    tau: tuple = (0.0,)
    seeds: tuple = (0, 1, 2, 3, 4)
    kmax: int = 0  # 0 skips the K sweep
    config: RunConfig = field(default_factory=RunConfig)
    bayes: bool = True
    mmn: bool = True


REPORT_COLUMNS = [
    "N", "tau", "seed", "ari_mmm", "ari_mmm_clean_units", "ari_mmn",
    "mape_M", "mape_Phi", "mape_Sigma", "mape_pi", "mape_all",
    "iterations", "converged", "best_k", "bayes_ari", "status",
]


def run_cell(scenario, N, tau, seed):
    """Fit one (N, tau, seed) cell; returns ``(report row, timings row)``."""
    nan = float("nan")
    gen = SCENARIOS[scenario.name](n=N, noise=tau, seed=seed)
    ds, truth = generate(gen)
    config = scenario.config.with_overrides(seed=seed)
    row = {c: nan for c in REPORT_COLUMNS}
    row.update(N=N, tau=tau, seed=seed, best_k="", status="ok")
    times = {"N": N, "tau": tau, "seed": seed}
    clean = np.setdiff1d(np.arange(N), truth.noisy_units)
    try:
        t0 = time.perf_counter()
        res = fit(ds, gen.K, config)
        times["mmm_seconds"] = time.perf_counter() - t0
        pred = res.assignments + 1
        row["ari_mmm"] = ari(truth.labels, pred)
        row["ari_mmm_clean_units"] = ari(truth.labels[clean], pred[clean])
        row["iterations"] = res.iterations
        row["converged"] = int(res.converged)
        for name, value in mape_blocks(res.params, truth.params).items():
            row[f"mape_{name}"] = value
    except (FitFailedError, NumericalError) as exc:
        log.warning("MMM fit failed for N=%d tau=%g seed=%d: %s", N, tau, seed, exc)
        row["status"] = "mmm_failed"
    if scenario.mmn:
        try:
            t0 = time.perf_counter()
            res = fit_mmn(ds, gen.K, config)
            times["mmn_seconds"] = time.perf_counter() - t0
            row["ari_mmn"] = ari(truth.labels, res.assignments + 1)
        except (FitFailedError, NumericalError) as exc:
            log.warning("MMN fit failed: %s", exc)
            row["status"] = "mmn_failed" if row["status"] == "ok" else row["status"] + "+mmn_failed"
    if scenario.kmax:
        try:
            t0 = time.perf_counter()
            row["best_k"] = select_k(ds, scenario.kmax, config, keep_fits=False).best_k
            times["select_seconds"] = time.perf_counter() - t0
        except SelectionError as exc:
            log.warning("K selection failed: %s", exc)
            row["status"] = "select_failed" if row["status"] == "ok" else row["status"] + "+select_failed"
    if scenario.bayes:
        row["bayes_ari"] = bayes_reference_ari(ds, truth, config, seed)
    return row, times


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def run_scenario(scenario, out_dir=None):
    """Run every (N, tau, seed) cell and optionally write the reports to ``out_dir``.

    ``report.csv`` depends only on the inputs; wall-clock times go to
    ``timings.csv`` and the generator settings to ``gen_config.json``.
    """
    rows, timings = [], []
    for N in scenario.N:
        for tau in scenario.tau:
            for seed in scenario.seeds:
                log.info("cell N=%d tau=%g seed=%d", N, tau, seed)
                row, times = run_cell(scenario, N, tau, seed)
                rows.append(row)
                timings.append(times)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        cols = ["N", "tau", "seed", "mmm_seconds", "mmn_seconds", "select_seconds"]
        with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for t in timings:
                w.writerow([_fmt(t.get(c, float("nan"))) for c in cols])
        provenance = {
            "scenario": scenario.name,
            "N": list(scenario.N),
            "tau": list(scenario.tau),
            "seeds": list(scenario.seeds),
            "kmax": scenario.kmax,
            "generator": SCENARIOS[scenario.name](n=scenario.N[0], noise=scenario.tau[0], seed=0).to_dict(),
            "config": scenario.config.to_dict(),
        }
        with open(os.path.join(out_dir, "gen_config.json"), "w") as fh:
            json.dump(provenance, fh, indent=2)
    return rows
