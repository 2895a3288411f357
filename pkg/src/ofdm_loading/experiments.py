"""Monte-Carlo sweeps over SNR, alpha and the power cap, plus the baseline comparison.

Every grid point of a sweep sees the same channel draws: trial ``t`` always
uses the taps generated from ``(seed, t)``, and only the swept quantity
changes.  One task covers one trial across the whole grid, so results
that a grid point can share with another (the uncapped solution reused by
every capped curve) are computed once.  Tasks may run in worker
processes; records are sorted before they are written, so the files do not
depend on the number of workers.
"""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from multiprocessing import get_context
from typing import Optional

import numpy as np

from .baseline import COMPARE_FIELDS, BaselineConfig, CompareRow, compare, greedy_load
from .channel import ChannelParams, realize
from .linkmodel import LinkParams, average_ber, mean_snr
from .lmsolver import LmConfig
from .loader import LoaderOptions, LoadingResult, optimize

__all__ = [
    "SweepKind",
    "SweepConfig",
    "TrialRecord",
    "SweepResult",
    "SNR_REFERENCE_POWER",
    "noise_for_snr",
    "figure_config",
    "average_snr",
    "run_sweep",
    "emit",
    "AGGREGATE_FIELDS",
    "TRIAL_FIELDS",
]

# Transmit power (W) that defines the nominal SNR of a noise level, with unit
# mean channel energy: 30 dB <-> 1e-9 W noise.
SNR_REFERENCE_POWER = 1e-6

DEFAULT_CAP = 1e-4
FIG_NOISE = 1e-9

AGGREGATE_FIELDS = ("curve", "value", "throughput", "power_W", "avg_ber", "converged", "snr_db")
TRIAL_FIELDS = (
    "curve", "value", "trial", "converged", "case", "iterations", "termination",
    "throughput", "power_W", "avg_ber", "snr_post", "snr_pre",
)


class SweepKind(str, Enum):
    SNR = "Snr"
    ALPHA = "Alpha"
    POWER_THRESHOLD = "PowerThreshold"
    BASELINE_COMPARE = "BaselineCompare"


def noise_for_snr(snr_db: float) -> float:
    """Noise variance (W) giving ``snr_db`` at the reference power."""
    return SNR_REFERENCE_POWER / 10.0 ** (snr_db / 10.0)


@dataclass(frozen=True)
class SweepConfig:
    """One sweep: what is varied, over which values, and everything held fixed.

    ``caps`` lists the power thresholds run as separate curves for the SNR
    and alpha sweeps (``inf`` means uncapped).  For the power-threshold
    sweep the grid itself holds the thresholds; for the comparison sweep
    the proposed loader runs with ``link.power_threshold``.
    """

    kind: SweepKind
    grid: tuple
    n_trials: int = 1000
    link: LinkParams = LinkParams()
    channel: ChannelParams = ChannelParams()
    lm: LmConfig = LmConfig()
    options: LoaderOptions = LoaderOptions()
    caps: tuple = (math.inf, DEFAULT_CAP)
    bit_set: tuple = BaselineConfig.bit_set

    def __post_init__(self):
        object.__setattr__(self, "kind", SweepKind(self.kind))
        grid = tuple(float(v) for v in self.grid)
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("grid must be non-empty and strictly increasing")
        object.__setattr__(self, "grid", grid)
        if int(self.n_trials) != self.n_trials or self.n_trials < 1:
            raise ValueError("n_trials must be a positive integer")
        if self.kind is SweepKind.ALPHA and not all(0 < a < 1 for a in grid):
            raise ValueError("alpha grid must lie in (0, 1)")
        if self.kind is SweepKind.POWER_THRESHOLD and not all(p > 0 for p in grid):
            raise ValueError("power thresholds must be positive")

    def curves(self):
        if self.kind in (SweepKind.SNR, SweepKind.ALPHA):
            return tuple(_cap_label(c) for c in self.caps)
        if self.kind is SweepKind.BASELINE_COMPARE:
            return ("proposed", "baseline")
        return ("capped",)


def _cap_label(cap: float) -> str:
    return "uncapped" if math.isinf(cap) else f"cap={cap!r}W"


@dataclass(frozen=True)
class TrialRecord:
    """Outcome of one trial at one grid point on one curve.

    ``snr_post`` is the mean of ``P_i C_i`` of the final allocation;
    ``snr_pre`` uses ``P_th / N`` on every subcarrier instead (the reference
    power when uncapped).  Both are linear.
    """

    curve: str
    value: float
    trial: int
    converged: bool
    case: str
    iterations: int
    termination: str
    throughput: float
    power_W: float
    avg_ber: float
    snr_post: float
    snr_pre: float

    def row(self):
        return tuple(getattr(self, f) for f in TRIAL_FIELDS)


@dataclass
class SweepResult:
    config: SweepConfig
    records: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)

    def curve(self, name: str):
        return [r for r in self.records if r.curve == name]

    def aggregate(self):
        """One row per (curve, grid point), in the order of :data:`AGGREGATE_FIELDS`."""
        groups = {}
        for r in self.records:
            groups.setdefault((r.curve, r.value), []).append(r)
        order = {c: k for k, c in enumerate(self.config.curves())}
        rows = []
        for (curve, value) in sorted(groups, key=lambda key: (order.get(key[0], len(order)), key[0], key[1])):
            recs = groups[(curve, value)]
            ok = [r for r in recs if r.converged]
            if ok:
                thr = float(np.mean([r.throughput for r in ok]))
                pw = float(np.mean([r.power_W for r in ok]))
                bers = [r.avg_ber for r in ok if not math.isnan(r.avg_ber)]
                ber = float(np.mean(bers)) if bers else math.nan
            else:
                thr = pw = ber = math.nan
            rows.append((curve, value, thr, pw, ber, f"{len(ok)}/{len(recs)}", average_snr(recs)))
        return rows


def average_snr(records, pre: bool = False) -> float:
    """Average SNR in dB over trials and subcarriers.

    Uses the converged records only.  Nulled subcarriers count as zero SNR
    in the mean.  NaN when nothing converged or every subcarrier is nulled.
    """
    vals = [r.snr_pre if pre else r.snr_post for r in records if r.converged]
    if not vals:
        return math.nan
    m = float(np.mean(vals))
    return 10.0 * math.log10(m) if m > 0 else math.nan


def figure_config(figure: int, n_trials: int = 1000, seed: int = 0, **overrides) -> SweepConfig:
    """Preset sweep for one of the four standard figure set-ups (1: SNR, 2: alpha, 3: power cap, 4: baseline)."""
    chan = ChannelParams(seed=seed)
    if figure == 1:
        cfg = SweepConfig(SweepKind.SNR, tuple(np.arange(10.0, 30.01, 2.5)), n_trials, channel=chan)
    elif figure == 2:
        cfg = SweepConfig(
            SweepKind.ALPHA, tuple(np.round(np.arange(0.1, 0.91, 0.1), 10)), n_trials,
            channel=replace(chan, noise_variance=FIG_NOISE),
        )
    elif figure == 3:
        grid = tuple(v * 1e-6 for v in (10, 20, 40, 60, 80, 100, 120, 140, 160, 200, 250, 300, 400))
        cfg = SweepConfig(
            SweepKind.POWER_THRESHOLD, grid, n_trials,
            channel=replace(chan, noise_variance=FIG_NOISE), caps=(),
        )
    elif figure == 4:
        cfg = SweepConfig(SweepKind.BASELINE_COMPARE, tuple(np.arange(10.0, 30.01, 2.5)), n_trials, channel=chan, caps=())
    else:
        raise ValueError(f"unknown figure {figure!r}; expected 1, 2, 3 or 4")
    return replace(cfg, **overrides) if overrides else cfg


def _record(curve, value, trial, res: LoadingResult, cnr, pre_power) -> TrialRecord:
    if res.converged:
        snr_post = mean_snr(res.final, cnr)
    else:
        snr_post = math.nan
    return TrialRecord(
        curve, float(value), trial, res.converged,
        res.case_used.value if res.case_used is not None else "",
        res.solver.iterations, str(res.solver.termination),
        res.throughput, res.total_power, res.achieved_avg_ber,
        snr_post, float(pre_power * np.mean(cnr)),
    )


def _pre_power(cap, n):
    return cap / n if math.isfinite(cap) else SNR_REFERENCE_POWER


def _run_trial(args):
    cfg, trial = args
    n = cfg.channel.n_subcarriers
    out, comps = [], []
    if cfg.kind is SweepKind.SNR or cfg.kind is SweepKind.BASELINE_COMPARE:
        taps = None
        for snr in cfg.grid:
            ch = realize(replace(cfg.channel, noise_variance=noise_for_snr(snr)), trial)
            if taps is None:
                taps = ch.taps
            assert np.array_equal(taps, ch.taps)
            if cfg.kind is SweepKind.SNR:
                out.extend(_cap_curves(cfg, cfg.link, ch, snr, trial, n))
            else:
                res = optimize(ch, cfg.link, cfg.lm, cfg.options)
                out.append(_record("proposed", snr, trial, res, ch.cnr, _pre_power(cfg.link.power_threshold, n)))
                row = compare(ch, res, cfg.link, cfg.bit_set, trial=trial)
                comps.append((snr, row))
                out.append(_baseline_record(snr, trial, res, row, ch.cnr, cfg))
    elif cfg.kind is SweepKind.ALPHA:
        ch = realize(cfg.channel, trial)
        for a in cfg.grid:
            out.extend(_cap_curves(cfg, replace(cfg.link, alpha=a), ch, a, trial, n))
    else:
        ch = realize(cfg.channel, trial)
        free = optimize(ch, replace(cfg.link, power_threshold=math.inf), cfg.lm, cfg.options)
        for cap in cfg.grid:
            res = optimize(ch, replace(cfg.link, power_threshold=cap), cfg.lm, cfg.options, unconstrained=free)
            out.append(_record("capped", cap, trial, res, ch.cnr, _pre_power(cap, n)))
    return out, comps


def _cap_curves(cfg, link, ch, value, trial, n):
    free = None
    recs = []
    for cap in cfg.caps:
        res = optimize(ch, replace(link, power_threshold=cap), cfg.lm, cfg.options, unconstrained=free)
        if math.isinf(cap):
            free = res
        recs.append(_record(_cap_label(cap), value, trial, res, ch.cnr, _pre_power(cap, n)))
    return recs


def _baseline_record(snr, trial, res, row: CompareRow, cnr, cfg) -> TrialRecord:
    n = len(cnr)
    if row.flagged:
        return TrialRecord("baseline", float(snr), trial, False, "", 0, "Skipped", math.nan, math.nan, math.nan, math.nan, math.nan)
    if row.power_W == 0:
        return TrialRecord("baseline", float(snr), trial, True, "", 0, "", 0.0, 0.0, math.nan, 0.0, 0.0)
    alloc = greedy_load(cnr, BaselineConfig(row.power_W, cfg.link.ber_threshold, cfg.bit_set))
    ber = average_ber(alloc, cnr, warn=False) if alloc.active.any() else math.nan
    return TrialRecord(
        "baseline", float(snr), trial, True, "", 0, "", alloc.throughput, alloc.total_power, ber,
        mean_snr(alloc, cnr), float(row.power_W / n * np.mean(cnr)),
    )


def run_sweep(config: SweepConfig, jobs: int = 1) -> SweepResult:
    """Run every trial of a sweep, optionally in ``jobs`` worker processes."""
    tasks = [(config, t) for t in range(config.n_trials)]
    if jobs > 1 and len(tasks) > 1:
        with get_context("spawn").Pool(min(jobs, len(tasks))) as pool:
            parts = pool.map(_run_trial, tasks, chunksize=max(1, len(tasks) // (4 * jobs)))
    else:
        parts = [_run_trial(t) for t in tasks]
    order = {c: k for k, c in enumerate(config.curves())}
    records = sorted((r for recs, _ in parts for r in recs), key=lambda r: (order[r.curve], r.value, r.trial))
    comps = sorted((c for _, cs in parts for c in cs), key=lambda c: (c[0], c[1].trial))
    return SweepResult(config, records, comps)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", name).strip("_")


def emit(result: SweepResult, path, prefix: Optional[str] = None, both_snr: bool = False):
    """Write the sweep tables under directory ``path``; returns the written paths.

    Files: ``<prefix>-aggregate.csv`` (one row per curve and grid point),
    ``<prefix>-trials.csv`` (one row per record), one
    ``<prefix>-<curve>-throughput.dat`` and ``-power.dat`` per curve, and for
    comparison sweeps ``<prefix>-compare.csv``.  With ``both_snr`` an extra
    ``<prefix>-snr.csv`` lists the post- and pre-allocation average SNR.
    Floats are written with ``repr``, so they read back exactly; NaN is an
    empty field.
    """
    os.makedirs(path, exist_ok=True)
    prefix = prefix or result.config.kind.value.lower()
    written = []

    def target(name):
        p = os.path.join(path, f"{prefix}-{name}")
        written.append(p)
        return p

    agg = result.aggregate()
    _write_csv(target("aggregate.csv"), AGGREGATE_FIELDS, agg)
    _write_csv(target("trials.csv"), TRIAL_FIELDS, (r.row() for r in result.records))
    for curve in result.config.curves():
        rows = [r for r in agg if r[0] == curve]
        for col, name in ((2, "throughput"), (3, "power")):
            with open(target(f"{_slug(curve)}-{name}.dat"), "w") as fh:
                fh.write(f"# {result.config.kind.value} {name}\n")
                for r in rows:
                    fh.write(f"{_fmt(r[1])} {_fmt(r[col]) or 'nan'}\n")
    if result.config.kind is SweepKind.BASELINE_COMPARE:
        _write_csv(target("compare.csv"), ("value",) + COMPARE_FIELDS + ("flagged",),
                   ((v,) + c.as_tuple() + (c.flagged,) for v, c in result.comparisons))
    if both_snr:
        groups = {}
        for r in result.records:
            groups.setdefault((r.curve, r.value), []).append(r)
        rows = [(c, v, average_snr(recs), average_snr(recs, pre=True)) for (c, v), recs in
                sorted(groups.items(), key=lambda kv: ([a[0] for a in agg].index(kv[0][0]), kv[0][1]))]
        _write_csv(target("snr.csv"), ("curve", "value", "snr_post_db", "snr_pre_db"), rows)
    return written
