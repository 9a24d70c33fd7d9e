"""Keyspace enumeration and parallel metric sweeps over a locked design."""
from __future__ import annotations

import csv
import io
import itertools
import math
import multiprocessing as mp
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .lock import ConfigError, LockedNetlist, Selection, arrangements_for, keyspace_size, parse_band, parse_spec_tokens
from .sim import Evaluator, PerfMetrics, SimOptions, Specs

DEFAULT_CAP = 1_000_000
CSV_COLUMNS = ("key", "gain_db", "gain_sign", "phase_margin_deg", "bw_3db_hz", "power_w", "gm_s", "class", "dc_iters")


class KeyspaceTooLarge(RuntimeError):
    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(f"keyspace of {size} keys exceeds the exhaustive cap of {cap}; use sampling")


class KeyClass(str, Enum):
    CORRECT_BY_CONSTRUCTION = "CORRECT_BY_CONSTRUCTION"
    DESIRED = "DESIRED"
    NEAR_CORRECT = "NEAR_CORRECT"
    INCORRECT = "INCORRECT"
    SIM_FAILED = "SIM_FAILED"


GOOD = (KeyClass.CORRECT_BY_CONSTRUCTION, KeyClass.DESIRED)


def format_selection(sel: Selection) -> str:
    return "-".join(str(i) for i in sel)


def parse_selection(text: str) -> Selection:
    return tuple(int(t) for t in text.strip().split("-"))


def enumerate_keys(
    sizes: Sequence[int],
    mode: str = "exhaustive",
    n: int | None = None,
    seed: int | None = None,
    cap: int = DEFAULT_CAP,
) -> Iterator[Selection]:
    """Selections in mixed-radix order (first group most significant), or
    ``n`` uniform draws with replacement."""
    if mode == "exhaustive":
        total = math.prod(sizes)
        if total > cap:
            raise KeyspaceTooLarge(total, cap)
        return itertools.product(*(range(s) for s in sizes))
    if mode == "sample":
        if n is None or n < 1 or seed is None:
            raise ValueError("sampling needs n >= 1 and a seed")
        rng = np.random.default_rng(seed)
        draws = np.column_stack([rng.integers(0, s, size=n) for s in sizes])
        return (tuple(int(v) for v in row) for row in draws)
    raise ValueError(f"unknown enumeration mode {mode!r}")


@dataclass(frozen=True)
class SweepConfig:
    mode: str = "exhaustive"
    n: int | None = None
    seed: int | None = None
    cap: int = DEFAULT_CAP
    specs: Specs = field(default_factory=Specs)
    guard_band: tuple[float, float] | None = None
    power_rel_window: float = 0.02
    chunk: int = 200


@dataclass(frozen=True)
class KeyRecord:
    selection: Selection
    metrics: PerfMetrics | None
    klass: KeyClass
    dc_iters: int


def classify(
    sel: Selection, m: PerfMetrics | None, specs: Specs, band, correct: Selection | None
) -> KeyClass:
    if m is None:
        return KeyClass.SIM_FAILED
    if correct is not None and sel == correct:
        return KeyClass.CORRECT_BY_CONSTRUCTION
    if specs.met(m):
        return KeyClass.DESIRED
    if band is not None and band[0] <= m.gain_db < band[1]:
        return KeyClass.NEAR_CORRECT
    return KeyClass.INCORRECT


def _num(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def csv_row(r: KeyRecord) -> list[str]:
    m = r.metrics
    if m is None:
        return [format_selection(r.selection), "", "", "", "", "", "", r.klass.value, str(r.dc_iters)]
    return [
        format_selection(r.selection),
        _num(m.gain_db),
        str(m.gain_sign),
        _num(m.phase_margin_deg),
        _num(m.bw_3db_hz),
        _num(m.power_w),
        _num(m.gm_s),
        r.klass.value,
        str(r.dc_iters),
    ]


# ---------------------------------------------------------------- workers

_WORKER: dict = {}


def _init_worker(locked: LockedNetlist, opts: SimOptions | None, blind: bool):
    table = None if blind else locked.lde
    _WORKER["locked"] = locked
    _WORKER["eval"] = Evaluator(locked.base, table, locked.reference_arrangements(), opts)


def _eval_chunk(chunk: list[Selection]) -> list[tuple[Selection, PerfMetrics | None, int]]:
    locked = _WORKER["locked"]
    ev = _WORKER["eval"]
    out = []
    for sel in chunk:
        m, dc = ev.run(arrangements_for(locked, sel))
        out.append((sel, m, dc.iterations))
    return out


def _chunks(it: Iterable[Selection], size: int) -> Iterator[list[Selection]]:
    it = iter(it)
    while True:
        block = list(itertools.islice(it, size))
        if not block:
            return
        yield block


def evaluate_stream(
    locked: LockedNetlist,
    selections: Iterable[Selection],
    jobs: int = 1,
    chunk: int = 200,
    opts: SimOptions | None = None,
    blind: bool = False,
) -> Iterator[tuple[Selection, PerfMetrics | None, int]]:
    """Metrics for each selection, yielded in input order for any ``jobs``."""
    if jobs <= 1:
        _init_worker(locked, opts, blind)
        for block in _chunks(selections, chunk):
            yield from _eval_chunk(block)
        return
    method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
    ctx = mp.get_context(method)
    with ctx.Pool(jobs, initializer=_init_worker, initargs=(locked, opts, blind)) as pool:
        for block in pool.imap(_eval_chunk, _chunks(selections, chunk)):
            yield from block


# ---------------------------------------------------------------- reports


@dataclass
class SweepReport:
    records: list[KeyRecord]
    keyspace: int
    guard_band: tuple[float, float] | None
    specs: Specs
    baseline_power_w: float | None = None
    power_rel_window: float = 0.02

    def counts(self) -> dict[str, int]:
        c = Counter(r.klass for r in self.records)
        return {k.value: c.get(k, 0) for k in KeyClass}

    @property
    def desired_fraction(self) -> float:
        good = sum(1 for r in self.records if r.klass in GOOD)
        return good / len(self.records) if self.records else 0.0

    def gains(self) -> np.ndarray:
        return np.array([r.metrics.gain_db for r in self.records if r.metrics is not None])

    def duplicates(self) -> int:
        c = Counter(r.selection for r in self.records)
        return sum(v - 1 for v in c.values() if v > 1)

    def power_window(self) -> tuple[float, float] | None:
        if self.baseline_power_w is None:
            return None
        p = self.baseline_power_w
        return p * (1 - self.power_rel_window), p * (1 + self.power_rel_window)

    def summary(self) -> dict:
        gains = self.gains()
        ok = [r.metrics for r in self.records if r.metrics is not None]
        out: dict = {
            "keyspace": self.keyspace,
            "evaluated": len(self.records),
            "duplicates": self.duplicates(),
            "counts": self.counts(),
            "desired_fraction": self.desired_fraction,
            "specs": self.specs.as_dict(),
            "gain_db": _stats(gains),
            "negative_gain_keys": sum(1 for m in ok if m.gain_sign < 0),
        }
        if self.guard_band is not None:
            verdict = gap_check(self, self.guard_band)
            out["gap"] = {
                "band": list(self.guard_band),
                "ok": verdict.ok,
                "occupancy": len(verdict.offenders),
                "offenders": [format_selection(s) for s in verdict.offenders[:100]],
            }
        win = self.power_window()
        if win is not None:
            in_win, desired = power_ambiguity(self, win)
            out["power_ambiguity"] = {
                "baseline_w": self.baseline_power_w,
                "window_w": list(win),
                "in_window": in_win,
                "desired_in_window": desired,
            }
        out["histograms"] = histograms(ok)
        return out


def _stats(a: np.ndarray) -> dict:
    if a.size == 0:
        return {"min": None, "max": None, "spread": None}
    return {"min": float(a.min()), "max": float(a.max()), "spread": float(a.max() - a.min())}


def _hist(values: np.ndarray, width: float) -> dict:
    if values.size == 0:
        return {"bin_width": width, "start": None, "counts": []}
    lo = math.floor(values.min() / width) * width
    hi = (math.floor(values.max() / width) + 1) * width
    nbins = max(1, int(round((hi - lo) / width)))
    counts, _ = np.histogram(values, bins=nbins, range=(lo, lo + nbins * width))
    return {"bin_width": width, "start": lo, "counts": [int(c) for c in counts]}


def histograms(ms: Sequence[PerfMetrics]) -> dict:
    """Gain 1 dB, phase margin 1 deg, bandwidth 0.1 decade, power 10 uW bins."""
    gain = np.array([m.gain_db for m in ms if math.isfinite(m.gain_db)])
    pm = np.array([m.phase_margin_deg for m in ms if m.phase_margin_deg is not None])
    bw = np.array([math.log10(m.bw_3db_hz) for m in ms if m.bw_3db_hz > 0])
    pw = np.array([m.power_w for m in ms])
    return {
        "gain_db": _hist(gain, 1.0),
        "phase_margin_deg": _hist(pm, 1.0),
        "log10_bw_3db_hz": _hist(bw, 0.1),
        "power_w": _hist(pw, 10e-6),
    }


def run_sweep(
    locked: LockedNetlist,
    cfg: SweepConfig,
    correct: Selection | None = None,
    out_csv: TextIO | None = None,
    jobs: int = 1,
    opts: SimOptions | None = None,
    blind: bool = False,
) -> SweepReport:
    """Evaluate and classify keys, streaming one CSV row per key.

    ``locked`` may be the redacted view; ``correct`` (from the secret key)
    only labels the correct-by-construction key.
    """
    sizes = locked.sizes
    sels = enumerate_keys(sizes, cfg.mode, cfg.n, cfg.seed, cfg.cap)
    writer = None
    if out_csv is not None:
        writer = csv.writer(out_csv, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
    records = []
    for sel, m, iters in evaluate_stream(locked, sels, jobs, cfg.chunk, opts, blind):
        rec = KeyRecord(sel, m, classify(sel, m, cfg.specs, cfg.guard_band, correct), iters)
        records.append(rec)
        if writer is not None:
            writer.writerow(csv_row(rec))
    baseline = None
    if correct is not None:
        ev = Evaluator(locked.base, None if blind else locked.lde, locked.reference_arrangements(), opts)
        bm = ev(arrangements_for(locked, correct))
        baseline = None if bm is None else bm.power_w
    return SweepReport(records, keyspace_size(locked), cfg.guard_band, cfg.specs, baseline, cfg.power_rel_window)


def sweep_to_string(locked: LockedNetlist, cfg: SweepConfig, **kw) -> tuple[str, SweepReport]:
    buf = io.StringIO()
    report = run_sweep(locked, cfg, out_csv=buf, **kw)
    return buf.getvalue(), report


@dataclass(frozen=True)
class GapVerdict:
    ok: bool
    offenders: list[Selection]


def gap_check(report: SweepReport, band: tuple[float, float]) -> GapVerdict:
    """True iff no evaluated key has gain in ``[a, b)``."""
    a, b = band
    bad = [r.selection for r in report.records if r.metrics is not None and a <= r.metrics.gain_db < b]
    return GapVerdict(not bad, bad)


def power_ambiguity(report: SweepReport, window: tuple[float, float]) -> tuple[int, int]:
    """(keys with power in window, of which meet every spec)."""
    lo, hi = window
    in_win = [r for r in report.records if r.metrics is not None and lo <= r.metrics.power_w <= hi]
    desired = sum(1 for r in in_win if r.klass in GOOD)
    assert len(in_win) >= desired
    return len(in_win), desired


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


class SweepConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def parse_sweep_config(text: str, defaults: SweepConfig | None = None) -> tuple[SweepConfig, bool]:
    """Read ``mode=``, ``n=``, ``seed=``, ``cap=``, ``guard_band=lo,hi``,
    ``power_window=frac``, ``blind=on|off`` and ``spec k=v ...`` lines.

    Returns the config and the LDE-blind flag.
    """
    cfg = defaults or SweepConfig()
    fields_: dict = {}
    specs = cfg.specs.as_dict()
    blind = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        try:
            if toks[0] == "spec":
                specs.update(parse_spec_tokens(toks[1:], lineno))
                continue
            for tok in toks:
                k, sep, v = tok.partition("=")
                if not sep:
                    raise SweepConfigError(f"unrecognised entry {tok!r}", lineno)
                if k == "mode":
                    if v not in ("exhaustive", "sample"):
                        raise SweepConfigError("mode must be exhaustive or sample", lineno)
                    fields_["mode"] = v
                elif k in ("n", "seed", "cap", "chunk"):
                    fields_[k] = int(float(v))
                elif k == "guard_band":
                    fields_["guard_band"] = parse_band(v, lineno)
                elif k == "power_window":
                    fields_["power_rel_window"] = float(v)
                elif k == "blind":
                    blind = v.lower() in ("on", "yes", "true", "1")
                else:
                    raise SweepConfigError(f"unknown setting {k!r}", lineno)
        except ConfigError as e:
            raise SweepConfigError(str(e)) from None
        except ValueError as e:
            if isinstance(e, SweepConfigError):
                raise
            raise SweepConfigError(f"bad value in {raw.strip()!r}", lineno) from None
    return replace(cfg, specs=Specs.from_mapping(specs), **fields_), blind
