#!/usr/bin/env python3
"""
Grid sweep over (family, K, beta, seed): train and evaluate every cell,
append one row per job to ``results.csv``, resume by skipping cells that
already have a row, and turn a results file into per-figure tables, trend
summaries and a plot script.
"""

import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from tqdm import tqdm

import config
import metrics
import model as vae
import trainer
from data import PatchBatch, load_patches, split_validation
from logger_config import get_logger
from parallel_processing import process_jobs_parallel
from results_exporter import (
    PlotSpec,
    append_result_row,
    export_results_to_json,
    export_table,
    generate_summary_statistics,
    read_results,
    write_plot_script,
    write_results,
)
from utils import hash64
from visualization import render_plot_script

logger = get_logger("sweep")

RESULTS_FILE = "results.csv"

# Generator streams derived from a job seed
_INIT_STREAM = 0
_EVAL_TAG = "eval"


@dataclass(frozen=True)
class SweepConfig:
    families: Tuple[str, ...]
    k_grid: Tuple[int, ...]
    beta_grid: Tuple[float, ...]
    seeds: Tuple[int, ...]
    train: trainer.TrainConfig
    data_path: str
    out_dir: str
    valid_path: Optional[str] = None
    valid_fraction: float = config.VALID_FRACTION
    n_samples_per_datum: int = config.N_SAMPLES_PER_DATUM
    workers: int = 0

    def __post_init__(self):
        for name in ("families", "k_grid", "beta_grid", "seeds"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"sweep grid '{name}' is empty")
            object.__setattr__(self, name, values)
        for family in self.families:
            vae.Family(family)
        if any(k <= 0 for k in self.k_grid):
            raise ValueError("k_grid entries must be positive")
        if any(not beta >= 0 for beta in self.beta_grid):
            raise ValueError("beta_grid entries must be nonnegative")

    @property
    def n_jobs(self) -> int:
        return len(self.families) * len(self.k_grid) * len(self.beta_grid) * len(self.seeds)

    @classmethod
    def from_resolved(cls, resolved: Dict[str, Dict]) -> "SweepConfig":
        sweep = resolved["sweep"]
        data = resolved["data"]
        return cls(
            families=tuple(sweep["families"]),
            k_grid=tuple(sweep["k_grid"]),
            beta_grid=tuple(float(b) for b in sweep["beta_grid"]),
            seeds=tuple(sweep["seeds"]),
            train=trainer.TrainConfig.from_resolved(resolved),
            data_path=data["path"],
            out_dir=resolved["output"]["out"],
            valid_path=data["valid_path"] or None,
            valid_fraction=data["valid_fraction"],
            n_samples_per_datum=resolved["eval"]["n_samples_per_datum"],
            workers=sweep["workers"],
        )


@dataclass(frozen=True)
class SweepJob:
    family: str
    k: int
    beta: float
    seed: int
    beta_index: int
    seed_index: int
    job_seed: int = field(default=0, compare=False)

    @property
    def key(self) -> Tuple[str, int, float, int]:
        return (self.family, self.k, self.beta, self.seed)


def job_seed(base_seed: int, family: str, k: int, beta_index: int, seed_index: int) -> int:
    """Reproducible, decorrelated per-job seed."""
    return hash64(base_seed, family, k, beta_index, seed_index)


def grid_jobs(cfg: SweepConfig) -> List[SweepJob]:
    """All grid cells in canonical order (family, K, beta, seed)."""
    jobs = []
    for family in cfg.families:
        for k in cfg.k_grid:
            for b_idx, beta in enumerate(cfg.beta_grid):
                for s_idx, seed in enumerate(cfg.seeds):
                    jobs.append(SweepJob(
                        family, int(k), float(beta), int(seed), b_idx, s_idx,
                        job_seed(cfg.train.seed, family, int(k), b_idx, s_idx),
                    ))
    return jobs


def default_valid_path(data_path: str) -> str:
    """``patches.bin`` -> ``patches_valid.bin``"""
    stem, suffix = os.path.splitext(data_path)
    return f"{stem}_valid{suffix}"


def load_train_valid(
    data_path: str,
    valid_path: Optional[str] = None,
    valid_fraction: float = config.VALID_FRACTION,
    seed: int = config.RANDOM_SEED
) -> Tuple[PatchBatch, PatchBatch]:
    """
    Training patches plus validation patches.

    Validation comes from ``valid_path``, else from the ``<stem>_valid<suffix>``
    file next to the data when it exists, else from a seeded hold-out split.
    """
    batch = load_patches(data_path)
    valid_path = valid_path or default_valid_path(data_path)
    if os.path.exists(valid_path):
        valid = load_patches(valid_path)
        if valid.side != batch.side:
            raise ValueError(f"validation side {valid.side} != training side {batch.side}")
        return batch, valid
    return split_validation(batch, valid_fraction, seed)


def train_and_evaluate(
    family: str,
    k: int,
    beta: float,
    seed: int,
    train_cfg: trainer.TrainConfig,
    train_data: PatchBatch,
    valid_data: PatchBatch,
    n_samples_per_datum: int = config.N_SAMPLES_PER_DATUM,
    record_seed: Optional[int] = None
) -> Tuple[vae.ModelParams, trainer.TrainLog, metrics.MetricsRecord]:
    """
    Initialize, train and evaluate one model from a single seed.

    Initialization, minibatch shuffling and evaluation sampling each draw from
    their own stream derived from ``seed``.
    """
    init_rng = np.random.default_rng([seed, _INIT_STREAM])
    params = vae.init_model(family, k, train_data.n_pixels, init_rng)
    cfg = replace(train_cfg, beta=float(beta), seed=int(seed))
    params, log = trainer.train(params, train_data, cfg)
    record = metrics.evaluate(
        params,
        valid_data,
        seed=hash64(seed, _EVAL_TAG),
        n_samples_per_datum=n_samples_per_datum,
        beta=beta,
        record_seed=seed if record_seed is None else record_seed,
    )
    return params, log, record


_DATA_CACHE: Dict[Tuple, Tuple[PatchBatch, PatchBatch]] = {}


def _sweep_data(cfg: SweepConfig) -> Tuple[PatchBatch, PatchBatch]:
    key = (cfg.data_path, cfg.valid_path, cfg.valid_fraction, cfg.train.seed)
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = load_train_valid(cfg.data_path, cfg.valid_path, cfg.valid_fraction, cfg.train.seed)
    return _DATA_CACHE[key]


def run_job(job: SweepJob, cfg: SweepConfig) -> Dict:
    """
    Train and evaluate one grid cell. Designed for parallel execution.

    Failures are caught and reported as a row with ``status = error``.
    """
    start = time.perf_counter()
    row = {
        "family": job.family, "k": job.k, "beta": job.beta, "seed": job.seed,
        "status": "ok", "epochs": 0, "final_total": math.nan, "final_kl": math.nan,
        "mc": math.nan, "pz": math.nan, "r2": math.nan, "overall": math.nan,
    }
    try:
        train_data, valid_data = _sweep_data(cfg)
        _, log, record = train_and_evaluate(
            job.family, job.k, job.beta, job.job_seed, cfg.train, train_data, valid_data,
            cfg.n_samples_per_datum, record_seed=job.seed,
        )
        last = log.records[-1]
        row.update(
            epochs=len(log.records), final_total=last.total, final_kl=last.kl,
            mc=record.mc, pz=record.pz, r2=record.r2, overall=record.overall,
        )
    except Exception as e:
        logger.exception(f"Job {job.key} failed: {e}")
        row["status"] = "error"
    row["wall_seconds"] = round(time.perf_counter() - start, 3)
    return row


def canonicalize_results(path: str, cfg: SweepConfig) -> List[Dict]:
    """
    Rewrite the results file in grid order, one row per cell.

    The first row of a cell wins; rows of cells outside the current grid are
    kept after the grid rows in their file order.
    """
    order = {job.key: i for i, job in enumerate(grid_jobs(cfg))}
    seen = set()
    in_grid, extra = [], []
    for row in read_results(path):
        key = (row["family"], row["k"], row["beta"], row["seed"])
        if key in seen:
            continue
        seen.add(key)
        (in_grid if key in order else extra).append(row)
    in_grid.sort(key=lambda r: order[(r["family"], r["k"], r["beta"], r["seed"])])
    rows = in_grid + extra
    write_results(path, rows)
    return rows


def run_grid(cfg: SweepConfig, verbose: bool = False) -> str:
    """
    Train and evaluate every grid cell, skipping cells already in the results file.

    Returns
    -------
    str
        Path of ``results.csv``

    Raises
    ------
    FileNotFoundError
        The data file does not exist
    """
    if not os.path.exists(cfg.data_path):
        raise FileNotFoundError(f"data file not found: {cfg.data_path}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    results_path = os.path.join(cfg.out_dir, RESULTS_FILE)

    done = {(r["family"], r["k"], r["beta"], r["seed"]) for r in read_results(results_path)}
    jobs = grid_jobs(cfg)
    pending = [job for job in jobs if job.key not in done]
    logger.info(f"Sweep: {len(jobs)} cells, {len(jobs) - len(pending)} already done, {len(pending)} to run")

    failed = 0
    results = process_jobs_parallel(run_job, pending, cfg.workers, cfg=cfg)
    for row in tqdm(results, total=len(pending), desc="Sweep", disable=not verbose):
        append_result_row(results_path, row)
        if row["status"] != "ok":
            failed += 1
        logger.debug(
            f"{row['family']} K={row['k']} beta={row['beta']} seed={row['seed']} "
            f"status={row['status']} mc={row['mc']:.4g} pz={row['pz']:.4g} r2={row['r2']:.4g}"
        )

    if os.path.exists(results_path):
        canonicalize_results(results_path, cfg)
    if failed:
        logger.warning(f"{failed} sweep jobs failed (status=error)")
    logger.info(f"Results saved to {results_path}")
    return results_path


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation, NaN for fewer than 2 points or a constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return math.nan
    return float(stats.spearmanr(x, y)[0])


def _by_beta(rows: List[Dict]) -> List[Dict]:
    return sorted(rows, key=lambda r: r["beta"])


def _groups(rows: List[Dict], *keys: str) -> Dict[tuple, List[Dict]]:
    groups: Dict[tuple, List[Dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    return dict(sorted(groups.items()))


def summarize_trends(rows: List[Dict]) -> List[Dict]:
    """
    Trend indicators per (family, K, seed) over the beta grid.

    Each entry holds the Spearman rho of MC against beta, MC(beta_max) /
    MC(beta_min), whether PZ strictly increases with beta, PZ at beta_max,
    the beta that minimizes the overall score and whether that minimum is
    interior to the grid.
    """
    trends = []
    ok_rows = [r for r in rows if r["status"] == "ok"]
    for (family, k, seed), cell in _groups(ok_rows, "family", "k", "seed").items():
        cell = _by_beta(cell)
        betas = [r["beta"] for r in cell]
        mc = [r["mc"] for r in cell]
        pz = [r["pz"] for r in cell]
        overall = [r["overall"] for r in cell]
        argmin = int(np.argmin(overall))
        trends.append({
            "family": family,
            "k": k,
            "seed": seed,
            "n_beta": len(cell),
            "spearman_mc_beta": spearman_rho(betas, mc),
            "mc_ratio": mc[-1] / mc[0] if mc[0] > 0 else math.nan,
            "pz_increasing": bool(np.all(np.diff(pz) > 0)) if len(pz) > 1 else False,
            "pz_at_max_beta": pz[-1],
            "overall_argmin_beta": betas[argmin],
            "overall_interior_min": 0 < argmin < len(cell) - 1,
        })
    return trends


MC_SPEARMAN_MAX = -0.9
MC_RATIO_MAX = 0.1
MC_FLAT_TOLERANCE = 0.25
PZ_PLATEAU = (0.40, 0.60)
PZ_AT_MAX_BETA_MIN = 0.85
PLATEAU_BETA = 1.0


@dataclass(frozen=True)
class Verdict:
    criterion: str
    family: str
    k: int
    seed: int
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.criterion} {self.family} k={self.k} seed={self.seed}: {self.detail}"


def _pvae_verdicts(trend: Dict, cell: List[Dict]) -> List[Tuple[str, bool, str]]:
    rho, ratio = trend["spearman_mc_beta"], trend["mc_ratio"]
    pz_max = trend["pz_at_max_beta"]
    return [
        ("mc_decreasing", rho <= MC_SPEARMAN_MAX and ratio <= MC_RATIO_MAX,
         f"rho={rho:.3f} (<= {MC_SPEARMAN_MAX}), mc ratio={ratio:.3g} (<= {MC_RATIO_MAX})"),
        ("pz_increasing", trend["pz_increasing"] and pz_max >= PZ_AT_MAX_BETA_MIN,
         f"strictly increasing={trend['pz_increasing']}, pz(beta_max)={pz_max:.4f} (>= {PZ_AT_MAX_BETA_MIN})"),
        ("overall_u_shape", trend["overall_interior_min"],
         f"overall minimum at beta={trend['overall_argmin_beta']:g}"),
    ]


def _grelu_verdicts(trend: Dict, cell: List[Dict]) -> List[Tuple[str, bool, str]]:
    mc = np.array([r["mc"] for r in cell])
    mc_spread = float(np.max(np.abs(mc / mc.mean() - 1.0))) if mc.mean() > 0 else math.inf
    plateau = [r for r in cell if r["beta"] >= PLATEAU_BETA]
    pz = [r["pz"] for r in plateau]
    overall = [r["overall"] for r in plateau]
    low, high = PZ_PLATEAU
    in_plateau = bool(pz) and all(low <= p <= high for p in pz)
    nondecreasing = bool(np.all(np.diff(overall) >= 0))
    pz_text = ", ".join(f"{p:.3f}" for p in pz) or "none"
    return [
        ("mc_flat", mc_spread <= MC_FLAT_TOLERANCE,
         f"max deviation from mean mc {mc_spread:.3f} (<= {MC_FLAT_TOLERANCE})"),
        ("pz_plateau", in_plateau, f"pz for beta >= {PLATEAU_BETA:g}: {pz_text} (in [{low}, {high}])"),
        ("overall_nondecreasing", nondecreasing,
         f"overall for beta >= {PLATEAU_BETA:g}: " + ", ".join(f"{o:.3f}" for o in overall)),
    ]


def acceptance_verdicts(rows: List[Dict]) -> List[Verdict]:
    """
    Pass/fail of the desk-scale beta-sweep targets per (family, K, seed).

    Poisson cells: MC falls with beta (Spearman and span), PZ rises strictly
    to at least 0.85, and the overall score has an interior minimum.
    Rectified-Gaussian cells: MC stays within 25% of its mean, PZ stays in
    [0.40, 0.60] and the overall score does not decrease for beta >= 1.
    Cells with fewer than 3 beta values are skipped.
    """
    ok_rows = [r for r in rows if r["status"] == "ok"]
    cells = _groups(ok_rows, "family", "k", "seed")
    verdicts = []
    for trend in summarize_trends(ok_rows):
        if trend["n_beta"] < 3:
            continue
        key = (trend["family"], trend["k"], trend["seed"])
        cell = _by_beta(cells[key])
        rules = _pvae_verdicts if trend["family"] == vae.Family.POISSON.value else _grelu_verdicts
        for criterion, passed, detail in rules(trend, cell):
            verdicts.append(Verdict(criterion, *key, bool(passed), detail))
    return verdicts


def _mean_std_table(rows: List[Dict], metric: str) -> List[list]:
    table = []
    for (family, k, beta), cell in _groups(rows, "family", "k", "beta").items():
        values = np.array([r[metric] for r in cell])
        table.append([family, k, beta, float(values.mean()), float(values.std()), len(cell)])
    return table


def plot_specs() -> List[PlotSpec]:
    return [
        PlotSpec("mc_vs_beta", "mc_vs_beta.png", csv="mc_vs_beta.csv", x="beta", y="mc_mean",
                 x_log=True, y_log=True, group=["family", "k"], errorbar="mc_std",
                 title="Metabolic cost vs beta"),
        PlotSpec("pz_vs_beta", "pz_vs_beta.png", csv="pz_vs_beta.csv", x="beta", y="pz_mean",
                 x_log=True, group=["family", "k"], errorbar="pz_std",
                 title="Proportion of zeros vs beta"),
        PlotSpec("r2_vs_pz", "r2_vs_pz.png", csv="r2_vs_pz.csv", x="pz", y="r2",
                 group=["family", "k"], style="scatter", title="Reconstruction vs sparsity"),
        PlotSpec("overall_vs_beta", "overall_vs_beta.png", csv="overall_vs_beta.csv", x="beta",
                 y="overall_mean", x_log=True, group=["family", "k"], errorbar="overall_std",
                 title="Overall performance vs beta"),
    ]


@dataclass
class ReportArtifacts:
    paths: Dict[str, str]
    n_rows: int
    verdicts: List[Verdict] = field(default_factory=list)


def report(
    results_path: str,
    out_dir: Optional[str] = None,
    family: Optional[str] = None,
    render: bool = False
) -> ReportArtifacts:
    """
    Write per-figure tables, trend summaries and the plot script.

    Tables are always written (header only when there are no ``ok`` rows);
    check ``n_rows`` of the result to detect an empty report.

    Parameters
    ----------
    results_path : str
        Sweep results CSV
    out_dir : str, optional
        Destination (defaults to the results file's directory)
    family : str, optional
        Restrict every table to one family
    render : bool
        Also render the plot script to PNG files

    Returns
    -------
    ReportArtifacts
        Artifact name -> path, and the number of rows reported

    Raises
    ------
    ValueError
        Malformed results CSV or unknown family
    """
    if family is not None:
        vae.Family(family)
    rows = read_results(results_path)
    if family is not None:
        rows = [r for r in rows if r["family"] == family]
    ok_rows = [r for r in rows if r["status"] == "ok"]

    out_dir = out_dir or os.path.dirname(os.path.abspath(results_path))
    os.makedirs(out_dir, exist_ok=True)
    written: Dict[str, str] = {}

    def table(name: str, header: Sequence[str], body) -> None:
        path = os.path.join(out_dir, f"{name}.csv")
        export_table(path, header, body)
        written[name] = path

    for metric in ("mc", "pz", "overall"):
        table(f"{metric}_vs_beta", ["family", "k", "beta", f"{metric}_mean", f"{metric}_std", "n"],
              _mean_std_table(ok_rows, metric))
    table("r2_vs_pz", ["family", "k", "beta", "seed", "pz", "r2"],
          [[r["family"], r["k"], r["beta"], r["seed"], r["pz"], r["r2"]]
           for r in sorted(ok_rows, key=lambda r: (r["family"], r["k"], r["beta"], r["seed"]))])
    table("monotonicity", ["family", "k", "spearman_mc_beta", "n"],
          [[fam, k, spearman_rho([r["beta"] for r in cell], [r["mc"] for r in cell]), len(cell)]
           for (fam, k), cell in _groups(ok_rows, "family", "k").items()])

    trends = summarize_trends(ok_rows)
    trend_header = ["family", "k", "seed", "n_beta", "spearman_mc_beta", "mc_ratio",
                    "pz_increasing", "pz_at_max_beta", "overall_argmin_beta", "overall_interior_min"]
    table("trends", trend_header, [[t[h] for h in trend_header] for t in trends])

    verdicts = acceptance_verdicts(ok_rows)
    table("acceptance", ["criterion", "family", "k", "seed", "passed", "detail"],
          [[v.criterion, v.family, v.k, v.seed, v.passed, v.detail] for v in verdicts])
    failed = [v for v in verdicts if not v.passed]
    if failed:
        logger.warning(f"{len(failed)} of {len(verdicts)} acceptance targets missed")

    summary_path = os.path.join(out_dir, "summary_statistics.json")
    export_results_to_json(generate_summary_statistics(rows), summary_path)
    written["summary_statistics"] = summary_path

    script_path = os.path.join(out_dir, "plots.txt")
    write_plot_script(script_path, plot_specs())
    written["plots"] = script_path

    if render and ok_rows:
        for path in render_plot_script(script_path, out_dir):
            written[os.path.splitext(os.path.basename(path))[0] + "_png"] = path

    logger.info(f"Report: {len(ok_rows)} rows -> {out_dir}")
    return ReportArtifacts(paths=written, n_rows=len(ok_rows), verdicts=verdicts)
