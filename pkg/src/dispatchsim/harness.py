"""Experiment orchestration: seeded sweep cells, resumable CSV results,
baseline comparisons and the dual-axis sweep plots.

A cell is one (policy, lambda, drift, seed) training run of a fixed number of
episodes; every row holds the greedy-evaluation metrics of one episode. Cells
are written to disk as complete blocks, so an interrupted sweep resumes by
skipping every cell already on disk.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import ConfigError, DomainError
from .env import EnvConfig, OrderDispatchEnv
from .trainer import Trainer, TrainerConfig, run_nod_episode

log = logging.getLogger(__name__)

POLICIES = ("kl_based", "il", "nod")

CSV_HEADER = ("policy", "lam", "drift", "seed", "episode", "adi", "orr", "wall_time_s")


class ExperimentError(RuntimeError):
    """One or more sweep cells failed; completed cells are already on disk."""


def default_lambda_grid() -> tuple[float, ...]:
    return tuple(round(0.05 * i, 2) for i in range(13))


@dataclass(frozen=True)
class ExperimentSpec:
    env: EnvConfig
    trainer: TrainerConfig
    policy: str
    episodes: int = 300
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    lambdas: tuple[float, ...] = None  # type: ignore[assignment]
    drifts: tuple[float, ...] = (1.0, 2.0, 4.0)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.lambdas is None:
            object.__setattr__(self, "lambdas", default_lambda_grid())
        if any(l < 0 for l in self.lambdas):
            raise ConfigError("lambda values must be nonnegative")

    def cells(self) -> list[tuple[str, float, float, int]]:
        """Cell keys in canonical run order; lambda collapses for il and nod."""
        lams = self.lambdas if self.policy == "kl_based" else (0.0,)
        return [
            (self.policy, float(lam), float(drift), int(seed))
            for drift in self.drifts
            for lam in lams
            for seed in self.seeds
        ]


@dataclass(frozen=True)
class ResultRow:
    policy: str
    lam: float
    drift: float
    seed: int
    episode: int
    adi: float
    orr: float
    wall_time_s: float

    @property
    def cell(self) -> tuple[str, float, float, int]:
        return (self.policy, self.lam, self.drift, self.seed)


def run_cell(
    env_cfg: EnvConfig,
    trainer_cfg: TrainerConfig,
    policy: str,
    lam: float,
    drift: float,
    seed: int,
    episodes: int,
) -> list[ResultRow]:
    """Train and evaluate one cell from scratch; fully determined by its key."""
    cfg = replace(env_cfg, drift_step=float(drift), seed=int(seed))
    env = OrderDispatchEnv(cfg)
    rows: list[ResultRow] = []
    if policy == "nod":
        for ep in range(episodes):
            t0 = time.perf_counter()
            adi, orr = run_nod_episode(env, ep, seed)
            rows.append(ResultRow(policy, lam, drift, seed, ep, adi, orr, time.perf_counter() - t0))
        return rows
    lam_eff = 0.0 if policy == "il" else float(lam)
    trainer = Trainer(cfg, replace(trainer_cfg, kl_weight=lam_eff), seed)
    for ep in range(episodes):
        t0 = time.perf_counter()
        trainer.train_episode(env, ep)
        adi, orr = trainer.eval_episode(env, ep)
        rows.append(ResultRow(policy, lam, drift, seed, ep, adi, orr, time.perf_counter() - t0))
    return rows


# -- CSV persistence -------------------------------------------------------


def format_row(row: ResultRow) -> str:
    return ",".join(
        (
            row.policy,
            repr(row.lam),
            repr(row.drift),
            str(row.seed),
            str(row.episode),
            repr(row.adi),
            repr(row.orr),
            repr(row.wall_time_s),
        )
    )


def read_rows(path) -> list[ResultRow]:
    path = Path(path)
    rows: list[ResultRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and tuple(header) != CSV_HEADER:
            raise DomainError(f"unexpected CSV header in {path}: {header}")
        for rec in reader:
            if len(rec) != len(CSV_HEADER):
                log.warning("skipping malformed row in %s: %r", path, rec)
                continue
            rows.append(
                ResultRow(
                    policy=rec[0],
                    lam=float(rec[1]),
                    drift=float(rec[2]),
                    seed=int(rec[3]),
                    episode=int(rec[4]),
                    adi=float(rec[5]),
                    orr=float(rec[6]),
                    wall_time_s=float(rec[7]),
                )
            )
    return rows


def _rows_by_cell(rows: Iterable[ResultRow]) -> dict[tuple, list[ResultRow]]:
    grouped: dict[tuple, list[ResultRow]] = {}
    for row in rows:
        grouped.setdefault(row.cell, []).append(row)
    return grouped


def run_experiment(
    spec: ExperimentSpec,
    out_path,
    resume: bool = True,
    jobs: int = 1,
) -> list[ResultRow]:
    """Run every cell of the spec, streaming complete cells to ``out_path``.

    With ``resume`` cells already complete on disk (from any spec) are kept
    verbatim and skipped. Failed cells do not abort the rest; they are
    reported together at the end.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    existing: dict[tuple, list[ResultRow]] = {}
    if resume and out_path.exists():
        existing = _rows_by_cell(read_rows(out_path))
    my_cells = spec.cells()
    mine = set(my_cells)

    def complete(cell: tuple) -> bool:
        got = existing.get(cell, [])
        return {r.episode for r in got} == set(range(spec.episodes))

    kept: list[ResultRow] = []
    for cell, cell_rows in existing.items():
        if cell in mine and not complete(cell):
            continue  # recompute partial cells of this spec
        kept.extend(cell_rows)
    with open(out_path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in kept:
            fh.write(format_row(row) + "\n")

    todo = [cell for cell in my_cells if not complete(cell)]
    log.info("%d/%d cells to run for policy=%s", len(todo), len(my_cells), spec.policy)
    collected: list[ResultRow] = [r for r in kept if r.cell in mine]
    failures: list[tuple[tuple, Exception]] = []

    def _append(cell_rows: list[ResultRow]) -> None:
        with open(out_path, "a", newline="") as fh:
            for row in cell_rows:
                fh.write(format_row(row) + "\n")

    if jobs <= 1:
        for cell in todo:
            policy, lam, drift, seed = cell
            try:
                cell_rows = run_cell(spec.env, spec.trainer, policy, lam, drift, seed, spec.episodes)
            except Exception as exc:  # pragma: no cover - surfaced to caller
                failures.append((cell, exc))
                log.error("cell %s failed: %s", cell, exc)
                continue
            _append(cell_rows)
            collected.extend(cell_rows)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                (cell, pool.submit(run_cell, spec.env, spec.trainer, *cell, spec.episodes))
                for cell in todo
            ]
            for cell, fut in futures:
                try:
                    cell_rows = fut.result()
                except Exception as exc:  # pragma: no cover
                    failures.append((cell, exc))
                    log.error("cell %s failed: %s", cell, exc)
                    continue
                _append(cell_rows)
                collected.extend(cell_rows)
    if failures:
        detail = "; ".join(f"{cell}: {exc}" for cell, exc in failures)
        raise ExperimentError(f"{len(failures)} cell(s) failed: {detail}")
    return collected


# -- aggregation and reporting ----------------------------------------------


@dataclass(frozen=True)
class Aggregate:
    """Final-window metrics of one (policy, lambda, drift) across seeds."""

    adi_by_seed: dict[int, float]
    orr_by_seed: dict[int, float]

    @property
    def adi_mean(self) -> float:
        return float(np.mean(list(self.adi_by_seed.values())))

    @property
    def orr_mean(self) -> float:
        return float(np.mean(list(self.orr_by_seed.values())))

    @property
    def adi_std(self) -> float:
        return float(np.std(list(self.adi_by_seed.values())))

    @property
    def orr_std(self) -> float:
        return float(np.std(list(self.orr_by_seed.values())))


def aggregate(rows: Sequence[ResultRow], window: int = 10) -> dict[tuple[str, float, float], Aggregate]:
    """Mean metrics over each cell's last ``window`` episodes, keyed by
    (policy, lambda, drift) with per-seed values inside."""
    by_cell = _rows_by_cell(rows)
    out: dict[tuple[str, float, float], dict[str, dict[int, float]]] = {}
    for (policy, lam, drift, seed), cell_rows in by_cell.items():
        cell_rows = sorted(cell_rows, key=lambda r: r.episode)
        tail = cell_rows[-window:]
        slot = out.setdefault((policy, lam, drift), {"adi": {}, "orr": {}})
        slot["adi"][seed] = float(np.mean([r.adi for r in tail]))
        slot["orr"][seed] = float(np.mean([r.orr for r in tail]))
    return {
        key: Aggregate(adi_by_seed=v["adi"], orr_by_seed=v["orr"]) for key, v in out.items()
    }


@dataclass(frozen=True)
class PolicySummary:
    policy: str
    drift: float
    lam: float
    adi_mean: float
    adi_std: float
    orr_mean: float
    orr_std: float
    adi_improvement_pct: float
    orr_improvement_pct: float


@dataclass(frozen=True)
class ComparisonReport:
    baseline: str
    window: int
    entries: tuple[PolicySummary, ...]

    def lookup(self, policy: str, drift: float) -> PolicySummary:
        for e in self.entries:
            if e.policy == policy and e.drift == drift:
                return e
        raise KeyError((policy, drift))

    def to_text(self) -> str:
        lines = [
            f"{'policy':<10} {'drift':>5} {'lambda':>6} {'ADI':>10} {'ORR':>8} "
            f"{'ADI vs ' + self.baseline:>12} {'ORR vs ' + self.baseline:>12}"
        ]
        for e in self.entries:
            lines.append(
                f"{e.policy:<10} {e.drift:>5g} {e.lam:>6g} {e.adi_mean:>10.4f} {e.orr_mean:>8.4f} "
                f"{e.adi_improvement_pct:>+11.2f}% {e.orr_improvement_pct:>+11.2f}%"
            )
        return "\n".join(lines)


def report(rows: Sequence[ResultRow], baseline: str = "nod", window: int = 10) -> ComparisonReport:
    """Summarize each policy per drift against the baseline's means.

    For the lambda-swept policy the reported lambda is the one with the best
    mean final-window ORR (lower lambda on ties). Improvements are percentage
    changes of seed-averaged means relative to the baseline at the same drift.
    """
    agg = aggregate(rows, window=window)
    drifts = sorted({drift for (_, _, drift) in agg})
    base = {}
    for d in drifts:
        key = (baseline, 0.0, d)
        if key not in agg:
            raise DomainError(f"missing baseline {baseline!r} rows for drift {d}")
        base[d] = agg[key]
    entries: list[PolicySummary] = []
    policies = sorted({p for (p, _, _) in agg}, key=POLICIES.index)
    for policy in policies:
        for d in drifts:
            choices = sorted((lam, a) for (p, lam, dd), a in agg.items() if p == policy and dd == d)
            if not choices:
                continue
            if policy == "kl_based":
                lam, best = max(choices, key=lambda item: (item[1].orr_mean, -item[0]))
            else:
                lam, best = choices[0]
            entries.append(
                PolicySummary(
                    policy=policy,
                    drift=d,
                    lam=lam,
                    adi_mean=best.adi_mean,
                    adi_std=best.adi_std,
                    orr_mean=best.orr_mean,
                    orr_std=best.orr_std,
                    adi_improvement_pct=100.0 * (best.adi_mean - base[d].adi_mean) / base[d].adi_mean,
                    orr_improvement_pct=100.0 * (best.orr_mean - base[d].orr_mean) / base[d].orr_mean,
                )
            )
    return ComparisonReport(baseline=baseline, window=window, entries=tuple(entries))


# -- plots -------------------------------------------------------------------


def emit_plots(rows: Sequence[ResultRow], out_dir, window: int = 10) -> list[Path]:
    """One dual-axis (ORR left, ADI right) sweep figure per drift, plus the
    plotted values as CSV. Identical rows produce byte-identical files."""
    if not rows:
        raise DomainError("no rows to plot")
    import matplotlib

    matplotlib.use("Agg", force=False)
    matplotlib.rcParams["svg.hashsalt"] = "dispatchsim"
    from matplotlib.figure import Figure

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(rows, window=window)
    swept = {k: v for k, v in agg.items() if k[0] in ("kl_based", "il")}
    if not swept:
        raise DomainError("plots need kl_based or il rows")
    drifts = sorted({drift for (_, _, drift) in swept})
    written: list[Path] = []
    for d in drifts:
        # one point per lambda; the plain-TD policy supplies lambda = 0
        points: dict[float, Aggregate] = {}
        for (policy, lam, dd), a in sorted(swept.items()):
            if dd != d:
                continue
            if lam not in points or policy == "kl_based":
                points[lam] = a
        lams = sorted(points)
        orr = [points[l].orr_mean for l in lams]
        adi = [points[l].adi_mean for l in lams]

        fig = Figure(figsize=(6, 4))
        ax = fig.add_subplot(111)
        ax2 = ax.twinx()
        ax.plot(lams, orr, marker="o", color="tab:blue", label="ORR")
        ax2.plot(lams, adi, marker="s", color="tab:red", label="ADI")
        ax.set_xlabel("lambda")
        ax.set_ylabel("ORR")
        ax2.set_ylabel("ADI")
        ax.set_title(f"drift {d:g}")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="best")
        fig.tight_layout()
        svg_path = out_dir / f"sweep_drift_{d:g}.svg"
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        csv_path = out_dir / f"sweep_drift_{d:g}.csv"
        with open(csv_path, "w", newline="") as fh:
            fh.write("lam,orr_mean,adi_mean\n")
            for lam, o, a in zip(lams, orr, adi):
                fh.write(f"{lam!r},{o!r},{a!r}\n")
        written.extend([svg_path, csv_path])
    return written
