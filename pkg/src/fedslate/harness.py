"""Experiment driver and evaluation: running modes end to end, metrics files,
the ETROR convergence metric and run comparison tables."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig
from .errors import ConfigError
from .training import (METRICS_HEADER, MetricsRecord, Trainer, load_checkpoint,
                       save_checkpoint)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "final.ckpt"


# --------------------------------------------------------------- metrics I/O
def metrics_text(records: Sequence[MetricsRecord]) -> str:
    lines = [",".join(METRICS_HEADER)] + [r.csv_row() for r in records]
    return "\n".join(lines) + "\n"


def write_metrics(path, records: Sequence[MetricsRecord]):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(metrics_text(records))
    os.replace(tmp, path)


def read_metrics(path) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRecord(int(row[0]), *map(float, row[1:])) for row in reader if row]


def metrics_column(records: Sequence[MetricsRecord], column: str) -> np.ndarray:
    if column not in METRICS_HEADER[1:]:
        raise ValueError(f"unknown metrics column {column!r}")
    return np.array([getattr(r, column) for r in records], dtype=np.float64)


# ------------------------------------------------------------------- running
@dataclass
class RunResult:
    records: List[MetricsRecord]
    output_dir: Path
    checkpoint: Optional[Path]
    trainer: Trainer


def _periodic_checkpoint(out: Path, every: int):
    def hook(trainer, record):
        if every and trainer.episode % every == 0 and trainer.episode < trainer.cfg.episodes:
            save_checkpoint(trainer, out / f"episode_{trainer.episode:06d}.ckpt")
    return hook


def run_experiment(cfg: ExperimentConfig, resume=None, output_dir=None) -> RunResult:
    """Run ``cfg`` to completion and write its artifacts into the output directory.

    Files: ``config.json``, ``metrics.csv``, ``final.ckpt`` (modes with
    parameters only), and optionally ``messages.tsv`` and ``trajectory.csv``.
    With ``resume`` the trainer is restored from that checkpoint and continues
    up to ``cfg.episodes``.
    """
    cfg = cfg.validate()
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = load_checkpoint(resume, overrides={"episodes": cfg.episodes})
        if trainer.cfg.mode != cfg.mode:
            raise ConfigError(f"mode: checkpoint was written by mode {trainer.cfg.mode!r}")
        cfg = trainer.cfg
    else:
        trainer = Trainer(cfg)
    config_mod.dump(cfg, out / "config.json")
    trainer.run(on_episode=_periodic_checkpoint(out, cfg.checkpoint_every))
    write_metrics(out / "metrics.csv", trainer.history)
    ckpt = None
    if trainer._nets():
        ckpt = out / CHECKPOINT_NAME
        save_checkpoint(trainer, ckpt)
    if cfg.message_log:
        trainer.log.write(out / "messages.tsv")
    if cfg.trajectory_log:
        trainer.env.write_trajectory(out / "trajectory.csv")
    return RunResult(trainer.history, out, ckpt, trainer)


def baseline_slateq_standalone(cfg: ExperimentConfig, **kwargs) -> RunResult:
    """Single-platform SlateQ on platform A; no federated agent."""
    return run_experiment(cfg.replace(mode="slateq-standalone"), **kwargs)


def baseline_random(cfg: ExperimentConfig, **kwargs) -> RunResult:
    return run_experiment(cfg.replace(mode="random"), **kwargs)


def evaluate_checkpoint(path, episodes: int, output_dir=None) -> List[MetricsRecord]:
    """Greedy rollouts (no exploration, no learning) from a saved run."""
    trainer = load_checkpoint(path)
    start = trainer.episode
    trainer = load_checkpoint(path, overrides={
        "episodes": start + episodes, "is_learn": False,
        "exploration.start": 0.0, "exploration.end": 0.0})
    trainer.run()
    records = trainer.history[start:]
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "evaluation.csv", records)
    return records


# --------------------------------------------------------------------- ETROR
@dataclass(frozen=True)
class EtrorResult:
    m_prime: Optional[int]
    optimal_reward: float
    epsilon: float
    window: int

    @property
    def converged(self):
        return self.m_prime is not None


def smooth(returns, window: int) -> np.ndarray:
    """Trailing moving average over full windows only.

    Entry ``j`` averages episodes ``j .. j + window - 1``. A series shorter
    than ``window`` is averaged as a single window.
    """
    x = np.asarray(returns, dtype=np.float64)
    # per-window means, so equal windows smooth to equal values
    return np.lib.stride_tricks.sliding_window_view(x, min(window, x.size)).mean(axis=1)


def compute_etror(returns, epsilon_term: float = 5.0, window: int = 20) -> EtrorResult:
    """Smallest episode whose smoothed return plus ``epsilon_term`` dominates
    every later smoothed return.

    Episodes are indexed by the last episode of their window, so the earliest
    possible M' is ``window - 1``. The final index always dominates trivially,
    so a series where only it qualifies is reported as not converged:
    ``m_prime`` is None and the optimal reward falls back to the final
    smoothed value.
    """
    if len(returns) == 0:
        raise ValueError("compute_etror needs a non-empty series")
    if window < 1 or epsilon_term < 0:
        raise ValueError("window must be >= 1 and epsilon_term >= 0")
    s = smooth(returns, window)
    offset = len(returns) - s.size
    # suffix maximum of strictly later values
    later = np.empty_like(s)
    later[-1] = -np.inf
    later[:-1] = np.maximum.accumulate(s[::-1])[::-1][1:]
    ok = np.flatnonzero(s + epsilon_term >= later)
    m = int(ok[0])
    if m == s.size - 1 and s.size > 1:
        return EtrorResult(None, float(s[-1]), float(epsilon_term), int(window))
    return EtrorResult(m + offset, float(s[m]), float(epsilon_term), int(window))


# ---------------------------------------------------------------- comparison
@dataclass
class RunSummary:
    label: str
    etror: EtrorResult
    mean_reward: float
    episodes: int


@dataclass
class Comparison:
    runs: List[RunSummary]
    column: str
    window: int
    epsilon: float
    horizon: Optional[int]

    def rows(self):
        fmt = lambda v: "N/A" if v is None or (isinstance(v, float) and math.isnan(v)) \
            else (str(v) if isinstance(v, int) else f"{v:.3f}")
        return [["metric"] + [r.label for r in self.runs],
                ["ETROR"] + [fmt(r.etror.m_prime) for r in self.runs],
                ["Optimal Reward"] + [fmt(r.etror.optimal_reward) for r in self.runs],
                ["Mean Reward"] + [fmt(r.mean_reward) for r in self.runs]]

    def preamble(self):
        horizon = "full" if self.horizon is None else f"[0, {self.horizon}]"
        return (f"# column={self.column} window={self.window} epsilon={self.epsilon:g} "
                f"mean_horizon={horizon}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.preamble() + "\n")
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [self.preamble()]
        for r in rows:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"


def _parse_run(spec: str, default_column: str):
    # "path" or "path:column"
    path, sep, col = str(spec).rpartition(":")
    if sep and col in METRICS_HEADER[1:]:
        return path, col
    return str(spec), default_column


def compare_runs(files: Sequence, column: str = "return_b", reference: int = 0,
                 epsilon_term: float = 5.0, window: int = 20,
                 labels: Optional[Sequence[str]] = None) -> Comparison:
    """Tabulate ETROR, optimal reward and mean reward for several metrics files.

    Mean reward averages the raw returns over episodes [0, M'] of the
    reference run (its whole horizon when the reference did not converge).
    Each entry of ``files`` may carry its own column as ``path:column``.
    """
    if len(files) < 2:
        raise ValueError("compare_runs needs at least two metrics files")
    parsed = [_parse_run(f, column) for f in files]
    series = [metrics_column(read_metrics(p), c) for p, c in parsed]
    shortest = min(s.size for s in series)
    if any(s.size != shortest for s in series):
        warnings.warn(f"episode counts differ; truncating all runs to {shortest} episodes")
        series = [s[:shortest] for s in series]
    results = [compute_etror(s, epsilon_term, window) for s in series]
    ref = results[reference]
    horizon = ref.m_prime
    end = shortest if horizon is None else horizon + 1
    names = list(labels) if labels else [
        f"{Path(p).parent.name or Path(p).stem}:{c}" for p, c in parsed]
    runs = [RunSummary(name, res, float(np.mean(s[:end])), int(s.size))
            for name, res, s in zip(names, results, series)]
    return Comparison(runs, column, window, float(epsilon_term), horizon)
