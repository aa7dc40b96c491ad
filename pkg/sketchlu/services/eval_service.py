from __future__ import annotations

import logging
import math
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from scipy.sparse.linalg import LinearOperator
from scipy.stats import rankdata, spearmanr
from sklearn.metrics import roc_curve
from tqdm import tqdm

from sketchlu.core.exceptions import EmptyInput, InputError, InvalidDimensions
from sketchlu.core.lanczos import (
    StreamCollector,
    extract_eigenpairs,
    kept_count,
    lanczos_hi_memory,
    lanczos_low_memory,
)
from sketchlu.core.linalg import OperatorLike, as_operator, operator_norm, qr_orthonormalize
from sketchlu.core.memory import track_allocations
from sketchlu.core.sketch import next_pow2, sketch_new
from sketchlu.core.sketched_lanczos import (
    derive_seed,
    preconditioned_sketched_lanczos,
    sketched_lanczos,
)
from sketchlu.models.dataset import SyntheticFisher
from sketchlu.models.report import ExperimentReport, ReportTable
from sketchlu.services.data_service import synthetic_fisher, synthetic_test_jacobians
from sketchlu.services.score_service import exact_score_from_jacobian, slu_score_from_jacobian

logger = logging.getLogger("sketchlu.services.eval_service")

QUANTILES = (0.5, 0.9, 0.95, 0.99)
INF_LABEL = "inf"
RECOVERY_MARGIN = 10


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _unit(rng: np.random.Generator, p: int) -> np.ndarray:
    v = rng.standard_normal(p)
    return v / np.linalg.norm(v)


def _quantile_metrics(errors: np.ndarray) -> Dict[str, float]:
    metrics = {f"q{int(round(q * 100))}": float(np.quantile(errors, q)) for q in QUANTILES}
    metrics["mean"] = float(np.mean(errors))
    metrics["max"] = float(np.max(errors))
    return metrics


# -------------------------------
# OoD metrics
# -------------------------------


def _score_array(scores: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyInput(f"{name} scores are empty")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} scores contain non-finite values")
    return arr


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """
    P(OoD score > ID score) with half credit for ties.

    Rank-sum (Mann-Whitney) form over average ranks, O(n log n).
    """
    id_arr = _score_array(id_scores, "ID")
    ood_arr = _score_array(ood_scores, "OoD")
    n_id, n_ood = id_arr.size, ood_arr.size

    ranks = rankdata(np.concatenate([id_arr, ood_arr]), method="average")
    rank_sum_ood = float(np.sum(ranks[n_id:]))
    u_ood = rank_sum_ood - n_ood * (n_ood + 1) / 2.0
    return u_ood / (n_id * n_ood)


def fpr_at_tpr(id_scores: Sequence[float], ood_scores: Sequence[float], tpr: float = 0.95) -> float:
    """Fraction of ID points flagged at the first threshold detecting `tpr` of OoD."""
    if not 0.0 < tpr <= 1.0:
        raise InputError(f"tpr must lie in (0, 1], got {tpr}")
    id_arr = _score_array(id_scores, "ID")
    ood_arr = _score_array(ood_scores, "OoD")
    y_true = np.concatenate([np.zeros(id_arr.size), np.ones(ood_arr.size)])
    fpr, tpr_curve, _ = roc_curve(y_true, np.concatenate([id_arr, ood_arr]))
    idx = int(np.searchsorted(tpr_curve, tpr, side="left"))
    return float(fpr[min(idx, fpr.size - 1)])


# -------------------------------
# Sketch error verifiers
# -------------------------------


def lemma1_check(
    p: int,
    k: int,
    s: int,
    trials: int,
    seed: int,
    *,
    aligned: bool = False,
    transform: str = "wht",
    show_progress: bool = False,
) -> ExperimentReport:
    """
    Sketching a fixed low-rank subspace.

    Each trial draws a random orthonormal U (p × k), a unit v (or v = U[:, 0]
    when aligned) and a fresh sketch, and records
    |‖(SU)ᵀ(Sv)‖ − ‖Uᵀv‖|.
    """
    if min(p, k, s, trials) < 1:
        raise InvalidDimensions(f"lemma1 grid values must be positive, got p={p}, k={k}, s={s}, trials={trials}")
    start = time.perf_counter()
    rng = _rng(seed)
    sketch_seeds = np.random.SeedSequence(seed).generate_state(trials, dtype=np.uint64)

    errors = np.empty(trials)
    for trial in tqdm(range(trials), desc="lemma1", disable=not show_progress):
        u, _ = qr_orthonormalize(rng.standard_normal((p, k)))
        v = u[:, 0].copy() if aligned else _unit(rng, p)
        sk = sketch_new(p, s, int(sketch_seeds[trial]), transform=transform)
        su = sk.apply_columns(u)
        sv = sk.apply(v)
        errors[trial] = abs(np.linalg.norm(su.T @ sv) - np.linalg.norm(u.T @ v))

    elapsed = time.perf_counter() - start
    logger.info(
        "Subspace sketch check finished",
        extra={"p": p, "k": k, "s": s, "trials": trials, "latency_ms": int(elapsed * 1000)},
    )
    return ExperimentReport(
        name="lemma1",
        config={"p": p, "k": k, "s": s, "trials": trials, "seed": seed, "aligned": aligned, "transform": transform},
        metrics=_quantile_metrics(errors),
        timings={"total": elapsed},
    )


def lemma2_check(
    p: int,
    k: int,
    s: int,
    trials: int,
    seed: int,
    *,
    op: Optional[OperatorLike] = None,
    transform: str = "wht",
    show_progress: bool = False,
) -> ExperimentReport:
    """
    Orthogonalizing the sketch of streamed Lanczos vectors.

    V comes from one low-memory Lanczos run (on `op`, or a synthetic Fisher
    of rank min(p, 4k)); U = QR(V) is the dense post-hoc basis. Each trial
    draws a fresh sketch and unit v, forms U_S = QR(SV) and records
    |‖U_Sᵀ(Sv)‖ − ‖Uᵀv‖|.
    """
    if min(p, k, s, trials) < 1:
        raise InvalidDimensions(f"lemma2 grid values must be positive, got p={p}, k={k}, s={s}, trials={trials}")
    start = time.perf_counter()
    if op is None:
        op = synthetic_fisher(p, min(p, 4 * k), 0.9, seed).operator()
    op = as_operator(op)
    if op.shape != (p, p):
        raise InvalidDimensions(f"operator shape {op.shape} does not match p={p}")

    collector = StreamCollector(p, k)
    res = lanczos_low_memory(op, k, derive_seed(seed, 0), emit=collector)
    vectors = collector.vectors
    u, _ = qr_orthonormalize(vectors)

    rng = _rng(derive_seed(seed, 1))
    sketch_seeds = np.random.SeedSequence(derive_seed(seed, 2)).generate_state(trials, dtype=np.uint64)

    errors = np.empty(trials)
    for trial in tqdm(range(trials), desc="lemma2", disable=not show_progress):
        sk = sketch_new(p, s, int(sketch_seeds[trial]), transform=transform)
        u_s, _ = qr_orthonormalize(sk.apply_columns(vectors))
        v = _unit(rng, p)
        errors[trial] = abs(np.linalg.norm(u_s.T @ sk.apply(v)) - np.linalg.norm(u.T @ v))

    elapsed = time.perf_counter() - start
    logger.info(
        "Streamed basis sketch check finished",
        extra={"p": p, "k": k, "k_effective": res.k_effective, "s": s, "latency_ms": int(elapsed * 1000)},
    )
    metrics = _quantile_metrics(errors)
    metrics["k_effective"] = float(res.k_effective)
    return ExperimentReport(
        name="lemma2",
        config={"p": p, "k": k, "s": s, "trials": trials, "seed": seed, "transform": transform},
        metrics=metrics,
        timings={"total": elapsed},
    )


# -------------------------------
# Synthetic ablation
# -------------------------------


def _dense_posthoc_basis(op: LinearOperator, k: int, seed: int) -> np.ndarray:
    collector = StreamCollector(op.shape[0], k)
    lanczos_low_memory(op, k, seed, emit=collector)
    u, _ = qr_orthonormalize(collector.vectors)
    return u


def _oracle_scores(sf: SyntheticFisher, queries: np.ndarray) -> np.ndarray:
    return np.array([float(q @ q) - sf.projection_norm(q) ** 2 for q in queries])


def _ablation_cell(
    sf: SyntheticFisher,
    k: int,
    s: int,
    lanczos_seed: int,
    sketch_seed: int,
    dense: np.ndarray,
    queries: np.ndarray,
    oracle: np.ndarray,
) -> Tuple[float, float, float]:
    sk = sketch_new(sf.p, s, sketch_seed)
    basis = sketched_lanczos(sf.operator(), k, sk, lanczos_seed)
    slu = np.array([slu_score_from_jacobian(basis, q) for q in queries])
    exact = np.array([exact_score_from_jacobian(dense, q) for q in queries])
    sketch_err = np.abs(slu - exact)
    lowrank_err = np.abs(exact - oracle)
    return float(np.mean(sketch_err)), float(np.mean(lowrank_err)), float(np.mean(slu - oracle))


def trend_spearman(values: Sequence[float]) -> float:
    """Spearman ρ between position and value; 0 when the values are constant."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2 or np.all(values == values[0]):
        return 0.0
    rho = spearmanr(np.arange(values.size), values).statistic
    return float(rho) if math.isfinite(rho) else 0.0


def exact_recovery_error(
    sf: SyntheticFisher, queries: np.ndarray, seed: int, margin: int = RECOVERY_MARGIN
) -> float:
    """
    Mean |exact(U) − oracle| where U holds the top R Ritz vectors of a
    hi-memory run of min(p, R + margin) iterations.

    The run stops early on breakdown. Vectors past the Krylov space are
    reorthogonalized noise with Ritz values near 0, so the top R pairs are
    the converged span(V).
    """
    k = min(sf.R + margin, sf.p)
    res = lanczos_hi_memory(sf.operator(), k, seed)
    spectrum = extract_eigenpairs(res, 1.0)
    u = spectrum.eigenvectors[:, : sf.R]
    oracle = _oracle_scores(sf, queries)
    exact = np.array([exact_score_from_jacobian(u, q) for q in queries])
    return float(np.mean(np.abs(exact - oracle)))


def ablation_surface(
    sf: SyntheticFisher,
    k_grid: Sequence[int],
    s_grid: Sequence[int],
    m_queries: int,
    seed: int,
    *,
    include_inf: bool = True,
    n_jobs: int = 1,
    show_progress: bool = False,
) -> ExperimentReport:
    """
    Score error over a (k, s) grid on a synthetic Fisher.

    Per query the error splits into
    - sketch error |slu(U_S) − exact(U)|, U the dense post-hoc basis of the same run
    - low-rank error |exact(U) − oracle|, oracle = ‖x‖² − ‖Vᵀx‖²

    Tables:
    - surface: mean of the summed errors
    - sketch_error, lowrank_error: each component
    - net_error: signed mean slu − oracle

    The "inf" column is the unsketched dense basis.
    """
    if not k_grid or not s_grid:
        raise EmptyInput("ablation grids must be non-empty")
    k_values = sorted(int(k) for k in k_grid)
    s_values = sorted(int(s) for s in s_grid)
    if k_values[0] < 1 or k_values[-1] > sf.p:
        raise InvalidDimensions(f"k grid must lie in [1, {sf.p}], got {k_values}")

    start = time.perf_counter()
    op = sf.operator()
    lanczos_seed = derive_seed(seed, 1)
    queries = synthetic_test_jacobians(sf, m_queries, derive_seed(seed, 0))
    oracle = _oracle_scores(sf, queries)

    dense: Dict[int, np.ndarray] = {}
    inf_lowrank: Dict[int, float] = {}
    for k in k_values:
        dense[k] = _dense_posthoc_basis(op, k, lanczos_seed)
        exact = np.array([exact_score_from_jacobian(dense[k], q) for q in queries])
        inf_lowrank[k] = float(np.mean(np.abs(exact - oracle)))

    cells = [(i, j, k, s) for i, k in enumerate(k_values) for j, s in enumerate(s_values)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_ablation_cell)(sf, k, s, lanczos_seed, derive_seed(seed, 100 + j), dense[k], queries, oracle)
        for i, j, k, s in tqdm(cells, desc="ablation", disable=not show_progress)
    )

    n_cols = len(s_values) + (1 if include_inf else 0)
    sketch_tab = np.zeros((len(k_values), n_cols))
    lowrank_tab = np.zeros((len(k_values), n_cols))
    net_tab = np.zeros((len(k_values), n_cols))
    for (i, j, _, _), (sketch_err, lowrank_err, net) in zip(cells, results):
        sketch_tab[i, j] = sketch_err
        lowrank_tab[i, j] = lowrank_err
        net_tab[i, j] = net
    if include_inf:
        for i, k in enumerate(k_values):
            lowrank_tab[i, -1] = inf_lowrank[k]
            exact = np.array([exact_score_from_jacobian(dense[k], q) for q in queries])
            net_tab[i, -1] = float(np.mean(exact - oracle))
    surface = sketch_tab + lowrank_tab

    rows = [f"k={k}" for k in k_values]
    cols = [str(s) for s in s_values] + ([INF_LABEL] if include_inf else [])

    def _table(values: np.ndarray) -> ReportTable:
        return ReportTable(row_labels=rows, col_labels=cols, values=values, index_name="k")

    metrics: Dict[str, float] = {}
    if n_cols >= 2:
        row_rho = [trend_spearman(surface[i]) for i in range(len(k_values))]
        metrics["spearman_s_max"] = max(row_rho)
    if len(k_values) >= 2:
        col_rho = [trend_spearman(surface[:, j]) for j in range(n_cols)]
        metrics["spearman_k_max"] = max(col_rho)
    if sf.R + 1 <= sf.p:
        metrics["exact_recovery_error"] = exact_recovery_error(sf, queries, lanczos_seed)

    elapsed = time.perf_counter() - start
    logger.info(
        "Ablation surface finished",
        extra={
            "k_grid": k_values,
            "s_grid": s_values,
            "m_queries": m_queries,
            "spearman_s_max": metrics.get("spearman_s_max"),
            "spearman_k_max": metrics.get("spearman_k_max"),
            "latency_ms": int(elapsed * 1000),
        },
    )
    return ExperimentReport(
        name="ablation",
        config={
            "p": sf.p,
            "R": sf.R,
            "decay": sf.decay,
            "fisher_seed": sf.seed,
            "k_grid": k_values,
            "s_grid": s_values,
            "m_queries": m_queries,
            "seed": seed,
            "include_inf": include_inf,
        },
        metrics=metrics,
        tables={
            "surface": _table(surface),
            "sketch_error": _table(sketch_tab),
            "lowrank_error": _table(lowrank_tab),
            "net_error": _table(net_tab),
        },
        timings={"total": elapsed},
    )


def preconditioning_ablation(
    sf: SyntheticFisher,
    k_total: int,
    k0_grid: Sequence[int],
    s: int,
    m_queries: int,
    seed: int,
) -> ExperimentReport:
    """Equal-rank comparison of (k0, k_total − k0) splits; one row per k0."""
    if not k0_grid:
        raise EmptyInput("k0 grid must be non-empty")
    if any(k0 < 0 or k0 > k_total for k0 in k0_grid):
        raise InvalidDimensions(f"every k0 must lie in [0, {k_total}], got {list(k0_grid)}")

    start = time.perf_counter()
    op = sf.operator()
    queries = synthetic_test_jacobians(sf, m_queries, derive_seed(seed, 0))
    oracle = _oracle_scores(sf, queries)
    sk = sketch_new(sf.p, s, derive_seed(seed, 2))
    lanczos_seed = derive_seed(seed, 1)

    k0_values = sorted(int(k0) for k0 in k0_grid)
    rows: List[List[float]] = []
    metrics: Dict[str, float] = {}
    for k0 in k0_values:
        basis = preconditioned_sketched_lanczos(op, k0, k_total - k0, sk, lanczos_seed)
        errors = np.abs(np.array([slu_score_from_jacobian(basis, q) for q in queries]) - oracle)
        pre, query = memory_account(sf.p, s, k_total, k0)
        rows.append([float(np.median(errors)), float(np.mean(errors)), float(pre), float(query)])
        metrics[f"median_error_k0={k0}"] = float(np.median(errors))

    elapsed = time.perf_counter() - start
    logger.info(
        "Preconditioning ablation finished",
        extra={"k_total": k_total, "k0_grid": k0_values, "s": s, "latency_ms": int(elapsed * 1000)},
    )
    return ExperimentReport(
        name="precondition",
        config={
            "p": sf.p,
            "R": sf.R,
            "decay": sf.decay,
            "fisher_seed": sf.seed,
            "k_total": k_total,
            "k0_grid": k0_values,
            "s": s,
            "m_queries": m_queries,
            "seed": seed,
        },
        metrics=metrics,
        tables={
            "splits": ReportTable(
                row_labels=[f"k0={k0}" for k0 in k0_values],
                col_labels=["median_error", "mean_error", "preprocess_floats", "query_floats"],
                values=np.array(rows),
                index_name="split",
            )
        },
        timings={"total": elapsed},
    )


# -------------------------------
# Post-hoc orthogonalization check
# -------------------------------


def _principal_basis(vectors: np.ndarray, eigenvalues: np.ndarray, top_pc: int) -> np.ndarray:
    scaled = vectors * eigenvalues
    left, _, _ = scipy.linalg.svd(scaled, full_matrices=False)
    return left[:, :top_pc]


def projector_distance(u_a: np.ndarray, u_b: np.ndarray, seed: int, iters: int = 200) -> float:
    """‖U_a U_aᵀ − U_b U_bᵀ‖₂ by power iteration."""
    p = u_a.shape[0]

    def _mv(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        return u_a @ (u_a.T @ v) - u_b @ (u_b.T @ v)

    diff = LinearOperator(shape=(p, p), matvec=_mv, rmatvec=_mv, dtype=np.float64)
    return operator_norm(diff, p, iters, seed)


def projector_agreement(op: OperatorLike, k: int, top_pc: int, seed: int) -> float:
    """
    Distance between the top-`top_pc` principal subspaces of the hi-memory
    and low-memory Ritz vectors (each scaled by its Ritz value).
    """
    if top_pc < 1 or top_pc > k:
        raise InvalidDimensions(f"need 1 <= top_pc <= k, got top_pc={top_pc}, k={k}")
    op = as_operator(op)
    p = op.shape[0]
    start = time.perf_counter()

    hi = extract_eigenpairs(lanczos_hi_memory(op, k, seed), 1.0)
    collector = StreamCollector(p, k)
    lo_res = lanczos_low_memory(op, k, seed, emit=collector)
    lo = extract_eigenpairs(lo_res, 1.0, vectors=collector.vectors)

    n_pc = min(top_pc, len(hi), len(lo))
    u_hi = _principal_basis(hi.eigenvectors, hi.eigenvalues, n_pc)
    u_lo = _principal_basis(lo.eigenvectors, lo.eigenvalues, n_pc)
    distance = projector_distance(u_lo, u_hi, derive_seed(seed, 3))

    logger.info(
        "Projector agreement computed",
        extra={
            "p": p,
            "k": k,
            "top_pc": n_pc,
            "distance": distance,
            "latency_ms": int((time.perf_counter() - start) * 1000),
        },
    )
    return distance


# -------------------------------
# Memory accounting
# -------------------------------


def memory_account(p: int, s: int, k: int, k0: int = 0) -> Tuple[int, int]:
    """(preprocess, query) float budgets: 4p + s(k+1) + k0·p and p + s(k+1) + k0·p."""
    extra = s * (k + 1) + k0 * p
    return 4 * p + extra, p + extra


def rank_for_budget(p: int, s: int, budget_floats: int, k0: int = 0) -> int:
    """Largest k with p + s(k+1) + k0·p <= budget, or 0."""
    room = budget_floats - p - k0 * p
    if room < 2 * s:
        return 0
    return room // s - 1


def sketched_memory_peak(p: int, s: int, k: int, seed: int = 0) -> float:
    """Instrumented peak (in floats) of one sketched Lanczos run on a diagonal operator."""
    diagonal = 0.9 ** np.arange(p, dtype=np.float64)
    op = LinearOperator(
        shape=(p, p),
        matvec=lambda v: diagonal * np.asarray(v).reshape(-1),
        rmatvec=lambda v: diagonal * np.asarray(v).reshape(-1),
        dtype=np.float64,
    )
    sk = sketch_new(p, s, derive_seed(seed, 2))
    with track_allocations() as tracker:
        sketched_lanczos(op, k, sk, seed)
        peak = tracker.peak_floats
    return peak


def memory_report(p: int, s: int, k: int, k0: int, seed: int = 0) -> ExperimentReport:
    pre, query = memory_account(p, s, k, k0)
    peak = sketched_memory_peak(p, s, k, seed) if k0 == 0 else math.nan
    metrics = {
        "preprocess_floats": float(pre),
        "query_floats": float(query),
        "dense_rank_at_budget": float(query // p),
        "sketched_rank_at_budget": float(rank_for_budget(p, s, query, k0)),
    }
    if math.isfinite(peak):
        metrics["instrumented_peak_floats"] = peak
    return ExperimentReport(
        name="memory",
        config={"p": p, "s": s, "k": k, "k0": k0, "seed": seed, "p_pad": next_pow2(p)},
        metrics=metrics,
        memory={"preprocess": float(pre), "query": float(query)},
    )


# -------------------------------
# Spectrum study
# -------------------------------


def spectrum_study(
    op: OperatorLike,
    iterations: Sequence[int],
    seeds: Sequence[int],
    top_fraction: float = 0.9,
) -> ExperimentReport:
    """
    Hi-memory Ritz values for every (iteration count, seed).

    One table per iteration count (rows = seeds). The agreement metric is the
    largest relative spread (max − min over seeds, divided by the mean
    magnitude) among the top ⌈top_fraction·k⌉ values.
    """
    if not iterations or not seeds:
        raise EmptyInput("spectrum study needs at least one iteration count and one seed")
    op = as_operator(op)
    start = time.perf_counter()

    tables: Dict[str, ReportTable] = {}
    metrics: Dict[str, float] = {}
    worst = 0.0
    for k in sorted(int(k) for k in iterations):
        values = np.full((len(seeds), k), np.nan)
        for row, seed in enumerate(seeds):
            res = lanczos_hi_memory(op, k, int(seed))
            ritz = extract_eigenpairs(res, 1.0).eigenvalues
            values[row, : ritz.size] = ritz
        n_keep = kept_count(k, top_fraction)
        kept = values[:, :n_keep]
        complete = kept[:, ~np.any(np.isnan(kept), axis=0)]
        if complete.size:
            scale = np.maximum(np.abs(complete.mean(axis=0)), np.finfo(np.float64).tiny)
            spread = float(np.max((complete.max(axis=0) - complete.min(axis=0)) / scale))
        else:
            spread = 0.0
        worst = max(worst, spread)
        metrics[f"relative_spread_k={k}"] = spread
        metrics[f"kept_k={k}"] = float(n_keep)
        tables[f"eigenvalues_k={k}"] = ReportTable(
            row_labels=[f"seed={int(seed)}" for seed in seeds],
            col_labels=[str(i + 1) for i in range(k)],
            values=values,
            index_name="seed",
        )
    metrics["max_relative_spread"] = worst

    elapsed = time.perf_counter() - start
    logger.info(
        "Spectrum study finished",
        extra={"iterations": list(iterations), "seeds": len(seeds), "max_relative_spread": worst},
    )
    return ExperimentReport(
        name="spectrum",
        config={
            "iterations": sorted(int(k) for k in iterations),
            "seeds": [int(seed) for seed in seeds],
            "top_fraction": top_fraction,
        },
        metrics=metrics,
        tables=tables,
        timings={"total": elapsed},
    )
