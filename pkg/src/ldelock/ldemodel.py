"""Arrangement-dependent parameter shifts and their statistical spread."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .netlist import Arrangement, DeviceKind, ModelCard, Mosfet, VtFlavor

MAX_SHIFT = 0.25


class MalformedTable(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NonIdentityBaseline(MalformedTable):
    pass


@dataclass(frozen=True)
class LdeEntry:
    vth_shift: float
    gm_shift: float


@dataclass(frozen=True)
class VariationEntry:
    vth_sd: float
    gm_sd: float


@dataclass(frozen=True)
class EffectiveParams:
    vth: float  # magnitude, volts
    kfactor: float  # A/V^2, geometry folded in
    lam: float

    def __post_init__(self):
        if not self.kfactor > 0:
            raise ValueError("effective kfactor must be positive")


Triple = tuple[DeviceKind, VtFlavor, Arrangement]
ALL_TRIPLES: tuple[Triple, ...] = tuple(itertools.product(DeviceKind, VtFlavor, Arrangement))


@dataclass(frozen=True)
class LdeTable:
    entries: dict[Triple, LdeEntry]
    variations: dict[Triple, VariationEntry]

    def __post_init__(self):
        for t in ALL_TRIPLES:
            if t not in self.entries or t not in self.variations:
                raise MalformedTable(f"table is missing {'/'.join(x.value for x in t)}")
            e = self.entries[t]
            if t[2] is Arrangement.BL and (e.vth_shift != 0.0 or e.gm_shift != 0.0):
                raise NonIdentityBaseline(f"BL entry for {t[0].value} {t[1].value} must be (0, 0)")

    def __hash__(self):
        return hash(tuple((self.entries[t], self.variations[t]) for t in ALL_TRIPLES))


def lookup(table: LdeTable, kind: DeviceKind, flavor: VtFlavor, arr: Arrangement) -> LdeEntry:
    return table.entries[(kind, flavor, arr)]


def nominal_params(m: Mosfet, card: ModelCard) -> EffectiveParams:
    return apply_lde(m, card, Arrangement.BL, None)


def apply_lde(
    m: Mosfet,
    card: ModelCard,
    arr: Arrangement,
    table: LdeTable | None,
    variation: tuple[float, float] = (1.0, 1.0),
) -> EffectiveParams:
    """Effective level-1 parameters of ``m`` laid out with arrangement ``arr``.

    ``table=None`` means an LDE-blind model: every arrangement behaves as BL.
    ``variation`` holds Monte Carlo multipliers for (Vth, K).
    """
    e = LdeEntry(0.0, 0.0) if table is None else lookup(table, m.kind, m.flavor, arr)
    vth_mult, k_mult = variation
    vth = card.vth0 * (1.0 + e.vth_shift)
    k = card.kfactor * (m.width / m.length) * m.fingers * m.mult * (1.0 + e.gm_shift)
    if vth_mult != 1.0:
        vth = vth * vth_mult
    if k_mult != 1.0:
        k = k * k_mult
    return EffectiveParams(vth, k, card.lam)


def sample_variations(
    table: LdeTable, kind: DeviceKind, flavor: VtFlavor, arr: Arrangement, n: int, rng_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent (Vth, K) multiplier draws from Normal(1, sd)."""
    v = table.variations[(kind, flavor, arr)]
    rng = np.random.default_rng(rng_seed)
    draws = rng.standard_normal((n, 2))
    return 1.0 + v.vth_sd * draws[:, 0], 1.0 + v.gm_sd * draws[:, 1]


def sample_variation(
    table: LdeTable, kind: DeviceKind, flavor: VtFlavor, arr: Arrangement, rng_seed: int
) -> tuple[float, float]:
    vth, gm = sample_variations(table, kind, flavor, arr, 1, rng_seed)
    return float(vth[0]), float(gm[0])


def _number(tok: str, lineno: int) -> float:
    try:
        if tok.endswith("%"):
            return float(tok[:-1]) / 100.0
        return float(tok)
    except ValueError:
        raise MalformedTable(f"bad number {tok!r}", lineno) from None


def parse_table(text: str, defaults: LdeTable | None = None) -> LdeTable:
    """Parse table text; entries not listed fall back to ``defaults``."""
    entries = dict(defaults.entries) if defaults else {}
    variations = dict(defaults.variations) if defaults else {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        f = body.split()
        if len(f) != 7:
            raise MalformedTable(f"expected 7 fields, got {len(f)}", lineno)
        try:
            key = (DeviceKind(f[0].upper()), VtFlavor(f[1].upper()), Arrangement(f[2].upper()))
        except ValueError:
            raise MalformedTable(f"bad kind/flavor/arrangement in {body!r}", lineno) from None
        vth_shift, gm_shift, vth_sd, gm_sd = (_number(x, lineno) for x in f[3:])
        if abs(vth_shift) > MAX_SHIFT or abs(gm_shift) > MAX_SHIFT:
            raise MalformedTable(f"shift magnitude above {MAX_SHIFT}", lineno)
        if vth_sd < 0 or gm_sd < 0:
            raise MalformedTable("standard deviations must be >= 0", lineno)
        if key[2] is Arrangement.BL and (vth_shift != 0 or gm_shift != 0):
            raise NonIdentityBaseline("BL shifts must be zero", lineno)
        entries[key] = LdeEntry(vth_shift, gm_shift)
        variations[key] = VariationEntry(vth_sd, gm_sd)
    return LdeTable(entries, variations)


_DEFAULT: LdeTable | None = None


def default_table() -> LdeTable:
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("ldelock.data").joinpath("default_lde.tbl").read_text(encoding="utf-8")
        _DEFAULT = parse_table(text)
    return _DEFAULT


def load_table(path: str | Path | None = None) -> LdeTable:
    if path is None:
        return default_table()
    return parse_table(Path(path).read_text(encoding="utf-8"), default_table())


def circuit_params(
    net,
    table: LdeTable | None,
    arrangements: dict[str, Arrangement] | None = None,
) -> dict[str, EffectiveParams]:
    """Effective parameters for every MOSFET of ``net``.

    Devices missing from ``arrangements`` keep the arrangement drawn in the
    netlist.
    """
    arrangements = arrangements or {}
    return {
        m.name: apply_lde(m, net.model_for(m), arrangements.get(m.name, m.arrangement), table)
        for m in net.mosfets
    }


def format_table(table: LdeTable) -> str:
    """Table text that :func:`parse_table` reads back to an equal table."""
    lines = ["# kind flavor arrangement vth_shift gm_shift vth_sd gm_sd"]
    for t in ALL_TRIPLES:
        e, v = table.entries[t], table.variations[t]
        lines.append(
            " ".join([t[0].value, t[1].value, t[2].value, repr(e.vth_shift), repr(e.gm_shift), repr(v.vth_sd), repr(v.gm_sd)])
        )
    return "\n".join(lines) + "\n"
