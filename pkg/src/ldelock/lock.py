"""Arrangement groups, one-hot keys and decoy pruning for a locked netlist."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .ldemodel import LdeTable, format_table, parse_table
from .netlist import Arrangement, Netlist, format_netlist, parse, parse_value
from .sim import PerfMetrics, Specs

Couple = tuple[Arrangement, ...]
Selection = tuple[int, ...]

MAX_COUPLES = {1: 3, 2: 9}


class LockError(ValueError):
    pass


class UnknownTransistor(LockError):
    pass


class DuplicateMember(LockError):
    pass


class TooManyCouples(LockError):
    pass


class UnlockableGroup(LockError):
    pass


class GroupCollapsed(LockError):
    def __init__(self, group: int, members: Sequence[str]):
        self.group = group
        self.members = tuple(members)
        super().__init__(f"pruning leaves group {group} ({' '.join(members)}) with fewer than 2 couples")


class InvalidKey(LockError):
    def __init__(self, group: int | None, message: str):
        self.group = group
        super().__init__(message)


@dataclass(frozen=True)
class ArrangementGroup:
    members: tuple[str, ...]
    couples: tuple[Couple, ...]
    correct_index: int | None = None  # None in redacted views

    def __post_init__(self):
        n = len(self.members)
        if n not in MAX_COUPLES:
            raise LockError(f"a group covers 1 or 2 transistors, got {n}")
        if len(self.couples) < 2:
            raise UnlockableGroup(f"group {' '.join(self.members)} needs at least 2 couples")
        if len(self.couples) > MAX_COUPLES[n]:
            raise TooManyCouples(f"group {' '.join(self.members)} has {len(self.couples)} couples, max {MAX_COUPLES[n]}")
        if len(set(self.couples)) != len(self.couples):
            raise LockError(f"group {' '.join(self.members)} has repeated couples")
        if any(len(c) != n for c in self.couples):
            raise LockError("couple length must match group coverage")
        if self.correct_index is not None and not 0 <= self.correct_index < len(self.couples):
            raise LockError("correct_index out of range")

    @property
    def size(self) -> int:
        return len(self.couples)

    @property
    def correct(self) -> Couple:
        if self.correct_index is None:
            raise LockError("redacted group has no correct couple")
        return self.couples[self.correct_index]


@dataclass(frozen=True)
class LockedNetlist:
    base: Netlist
    groups: tuple[ArrangementGroup, ...]
    bit_perm: tuple[int, ...]
    lde: LdeTable

    def __post_init__(self):
        seen: set[str] = set()
        for g in self.groups:
            for m in g.members:
                if m in seen:
                    raise DuplicateMember(f"transistor {m} appears in more than one group")
                seen.add(m)
        if sorted(self.bit_perm) != list(range(keylength(self))):
            raise LockError("bit_perm is not a permutation of the key bits")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(g.size for g in self.groups)

    @property
    def grouped(self) -> list[str]:
        return [m for g in self.groups for m in g.members]

    @property
    def is_redacted(self) -> bool:
        return any(g.correct_index is None for g in self.groups)

    def correct_selection(self) -> Selection:
        return tuple(g.correct_index for g in self.groups)

    def redacted(self) -> "LockedNetlist":
        """Same design without the secret: correct indices dropped, grouped
        transistors drawn as BL in the netlist."""
        grouped = set(self.grouped)
        base = self.base.with_arrangements({m: Arrangement.BL for m in grouped})
        groups = tuple(replace(g, correct_index=None) for g in self.groups)
        return replace(self, base=base, groups=groups)

    def reference_arrangements(self) -> dict[str, Arrangement]:
        """Arrangement map visible without the key: grouped devices at BL."""
        ref = {m.name: m.arrangement for m in self.base.mosfets}
        for name in self.grouped:
            ref[name] = Arrangement.BL
        return ref

    def offsets(self) -> list[int]:
        out, acc = [], 0
        for g in self.groups:
            out.append(acc)
            acc += g.size
        return out


@dataclass(frozen=True)
class Key:
    bits: tuple[int, ...]

    def __str__(self):
        return "".join(str(b) for b in self.bits)

    @classmethod
    def parse(cls, text: str) -> "Key":
        s = "".join(text.split())
        if not s or set(s) - {"0", "1"}:
            raise InvalidKey(None, "key must be a string of 0/1 bits")
        return cls(tuple(int(c) for c in s))


def keylength(locked: LockedNetlist) -> int:
    return sum(g.size for g in locked.groups)


def keyspace_size(locked: LockedNetlist) -> int:
    return math.prod(g.size for g in locked.groups)


def raw_patterns(locked: LockedNetlist) -> int:
    return 2 ** keylength(locked)


def key_for(locked: LockedNetlist, selection: Selection) -> Key:
    """Physical key bits selecting couple ``selection[g]`` in every group."""
    if len(selection) != len(locked.groups):
        raise InvalidKey(None, f"selection has {len(selection)} entries for {len(locked.groups)} groups")
    bits = [0] * keylength(locked)
    for g, (grp, off, s) in enumerate(zip(locked.groups, locked.offsets(), selection)):
        if not 0 <= s < grp.size:
            raise InvalidKey(g, f"group {g}: couple index {s} out of range")
        bits[locked.bit_perm[off + s]] = 1
    return Key(tuple(bits))


def selection_of(locked: LockedNetlist, key: Key) -> Selection:
    if len(key.bits) != keylength(locked):
        raise InvalidKey(None, f"key has {len(key.bits)} bits, lock needs {keylength(locked)}")
    logical = [key.bits[p] for p in locked.bit_perm]
    sel = []
    for g, (grp, off) in enumerate(zip(locked.groups, locked.offsets())):
        chunk = logical[off : off + grp.size]
        if sum(chunk) != 1:
            raise InvalidKey(g, f"group {g} ({' '.join(grp.members)}) has {sum(chunk)} bits set, expected 1")
        sel.append(chunk.index(1))
    return tuple(sel)


def arrangements_for(locked: LockedNetlist, selection: Selection) -> dict[str, Arrangement]:
    arr = {m.name: m.arrangement for m in locked.base.mosfets}
    for g, s in zip(locked.groups, selection):
        for name, a in zip(g.members, g.couples[s]):
            arr[name] = a
    return arr


def apply_key(locked: LockedNetlist, key: Key) -> dict[str, Arrangement]:
    """Per-transistor arrangements selected by ``key``."""
    return arrangements_for(locked, selection_of(locked, key))


@dataclass(frozen=True)
class GroupSpec:
    members: tuple[str, ...]
    add: int


def build_lock(
    net: Netlist,
    group_specs: Sequence[GroupSpec],
    rng_seed: int,
    table: LdeTable,
    permute_bits: bool = True,
) -> LockedNetlist:
    """Hide each group's drawn couple among ``add`` distinct random decoys."""
    mos = {m.name: m for m in net.mosfets}
    rng = np.random.default_rng(rng_seed)
    seen: set[str] = set()
    groups = []
    for spec in group_specs:
        for name in spec.members:
            if name not in mos:
                raise UnknownTransistor(f"no MOSFET named {name!r}")
            if name in seen:
                raise DuplicateMember(f"transistor {name} appears in more than one group")
            seen.add(name)
        n = len(spec.members)
        if n not in MAX_COUPLES:
            raise LockError(f"a group covers 1 or 2 transistors, got {n}")
        if spec.add < 1:
            raise UnlockableGroup(f"group {' '.join(spec.members)} needs at least one decoy")
        if spec.add + 1 > MAX_COUPLES[n]:
            raise TooManyCouples(f"group {' '.join(spec.members)}: {spec.add} decoys, at most {MAX_COUPLES[n] - 1}")
        original = tuple(mos[name].arrangement for name in spec.members)
        universe = [c for c in itertools.product(Arrangement, repeat=n) if c != original]
        picks = rng.choice(len(universe), size=spec.add, replace=False)
        decoys = [universe[i] for i in picks]
        pos = int(rng.integers(spec.add + 1))
        couples = decoys[:pos] + [original] + decoys[pos:]
        groups.append(ArrangementGroup(tuple(spec.members), tuple(couples), pos))
    total = sum(len(g.couples) for g in groups)
    perm = tuple(int(i) for i in rng.permutation(total)) if permute_bits else tuple(range(total))
    return LockedNetlist(net, tuple(groups), perm, table)


# ---------------------------------------------------------------- pruning


@dataclass(frozen=True)
class PrunePolicy:
    specs: Specs
    guard_band: tuple[float, float] | None = None
    alarm_negative_gain: bool = True
    alarm_scope: tuple[str, ...] = ()  # members whose groups the alarm covers; empty: all
    alarm_floor_db: float | None = None  # also alarm on gain below this
    drop_desired: bool = True
    refill: bool = True
    seed: int = 0

    def alarm_applies(self, members: Sequence[str]) -> bool:
        if not self.alarm_negative_gain:
            return False
        return not self.alarm_scope or any(m in self.alarm_scope for m in members)


@dataclass(frozen=True)
class PruneEvent:
    group: int
    members: tuple[str, ...]
    couple: Couple
    action: str  # "kept", "dropped", "added", "rejected"
    reason: str
    gain_db: float | None
    gain_sign: int | None
    power_w: float | None

    def as_dict(self) -> dict:
        return {
            "group": self.group,
            "members": list(self.members),
            "couple": [a.value for a in self.couple],
            "action": self.action,
            "reason": self.reason,
            "gain_db": self.gain_db,
            "gain_sign": self.gain_sign,
            "power_w": self.power_w,
        }


@dataclass
class PruneReport:
    order: list[int]
    events: list[PruneEvent] = field(default_factory=list)
    sizes_before: tuple[int, ...] = ()
    sizes_after: tuple[int, ...] = ()

    @property
    def dropped(self) -> list[PruneEvent]:
        return [e for e in self.events if e.action == "dropped"]

    def as_dict(self) -> dict:
        return {
            "group_order": self.order,
            "sizes_before": list(self.sizes_before),
            "sizes_after": list(self.sizes_after),
            "events": [e.as_dict() for e in self.events],
        }


Evaluator = Callable[[Mapping[str, Arrangement]], "PerfMetrics | None"]


def judge(metrics: PerfMetrics | None, policy: PrunePolicy, members: Sequence[str] = ()) -> str | None:
    """Reason to drop a decoy with these single-deviation metrics, or None."""
    if metrics is None:
        return None
    if policy.alarm_applies(members):
        if metrics.gain_sign < 0:
            return "alarm"
        if policy.alarm_floor_db is not None and metrics.gain_db < policy.alarm_floor_db:
            return "alarm"
    if policy.drop_desired and policy.specs.met(metrics):
        return "desired"
    if policy.guard_band is not None:
        a, b = policy.guard_band
        if a <= metrics.gain_db < b:
            return "guard_band"
    return None


def _event(gi, grp, couple, action, reason, m):
    return PruneEvent(
        gi,
        grp.members,
        couple,
        action,
        reason,
        None if m is None else m.gain_db,
        None if m is None else m.gain_sign,
        None if m is None else m.power_w,
    )


def prune(locked: LockedNetlist, evaluator: Evaluator, policy: PrunePolicy) -> tuple[LockedNetlist, PruneReport]:
    """Drop decoys that give alarming, correct or nearly correct behaviour.

    Every decoy is judged with all other groups at their correct couples.  With
    ``refill`` a dropped decoy is replaced by an unused couple that passes, so
    group sizes hold while candidates last.
    """
    if locked.is_redacted:
        raise LockError("pruning needs the unredacted design")
    rng = np.random.default_rng(policy.seed)
    order = [int(i) for i in rng.permutation(len(locked.groups))]
    correct = locked.correct_selection()
    report = PruneReport(order=order, sizes_before=locked.sizes)
    new_groups = list(locked.groups)
    # surviving slot indices per group; a refilled slot keeps its key wire
    kept_slots = [list(range(g.size)) for g in locked.groups]
    for gi in order:
        grp = locked.groups[gi]
        base_arr = arrangements_for(locked, correct)

        def evaluate(couple: Couple):
            arr = dict(base_arr)
            arr.update(zip(grp.members, couple))
            return evaluator(arr)

        used = set(grp.couples)
        pool = [c for c in itertools.product(Arrangement, repeat=len(grp.members)) if c not in used]
        pool = [pool[i] for i in rng.permutation(len(pool))] if policy.refill else []
        slots: list[Couple | None] = []
        for ci, couple in enumerate(grp.couples):
            if ci == grp.correct_index:
                slots.append(couple)
                continue
            m = evaluate(couple)
            reason = judge(m, policy, grp.members)
            if reason is None:
                report.events.append(_event(gi, grp, couple, "kept", "", m))
                slots.append(couple)
                continue
            report.events.append(_event(gi, grp, couple, "dropped", reason, m))
            replacement = None
            while pool:
                cand = pool.pop(0)
                mc = evaluate(cand)
                why = judge(mc, policy, grp.members)
                if why is None:
                    report.events.append(_event(gi, grp, cand, "added", "", mc))
                    replacement = cand
                    break
                report.events.append(_event(gi, grp, cand, "rejected", why, mc))
            slots.append(replacement)
        couples = tuple(c for c in slots if c is not None)
        if len(couples) < 2:
            raise GroupCollapsed(gi, grp.members)
        correct_idx = sum(1 for c in slots[: grp.correct_index] if c is not None)
        new_groups[gi] = ArrangementGroup(grp.members, couples, correct_idx)
        kept_slots[gi] = [i for i, c in enumerate(slots) if c is not None]

    # Surviving wires keep their relative physical order.
    old_off = locked.offsets()
    phys = [locked.bit_perm[old_off[gi] + i] for gi in range(len(locked.groups)) for i in kept_slots[gi]]
    rank = {p: r for r, p in enumerate(sorted(phys))}
    out = LockedNetlist(locked.base, tuple(new_groups), tuple(rank[p] for p in phys), locked.lde)
    report.sizes_after = out.sizes
    report.events.sort(key=lambda e: (e.group, [a.value for a in e.couple], e.action))
    return out, report


def correct_arrangements(locked: LockedNetlist) -> dict[str, Arrangement]:
    return arrangements_for(locked, locked.correct_selection())


def group_spec_summary(specs: Iterable[GroupSpec]) -> str:
    return ", ".join(f"{'/'.join(s.members)}+{s.add}" for s in specs)


# ---------------------------------------------------------------- config files


class ConfigError(LockError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


_FLAGS = {"on": True, "yes": True, "true": True, "1": True, "off": False, "no": False, "false": False, "0": False}


@dataclass
class LockConfig:
    groups: list[GroupSpec]
    seed: int | None = None
    permute_bits: bool = True
    guard_band: tuple[float, float] | None = None
    specs: dict[str, float] = field(default_factory=dict)
    prune: bool = True
    drop_desired: bool = True
    refill: bool = True
    alarm_negative_gain: bool = True
    alarm_scope: tuple[str, ...] = ()
    alarm_floor_db: float | None = None

    def policy(self, specs, seed: int) -> PrunePolicy:
        return PrunePolicy(
            specs=specs,
            guard_band=self.guard_band,
            alarm_negative_gain=self.alarm_negative_gain,
            alarm_scope=self.alarm_scope,
            alarm_floor_db=self.alarm_floor_db,
            drop_desired=self.drop_desired,
            refill=self.refill,
            seed=seed,
        )


def _flag(v: str, lineno: int) -> bool:
    try:
        return _FLAGS[v.lower()]
    except KeyError:
        raise ConfigError(f"expected on/off, got {v!r}", lineno) from None


def parse_band(v: str, lineno: int | None = None) -> tuple[float, float]:
    parts = v.split(",")
    if len(parts) != 2:
        raise ConfigError(f"band needs two comma-separated numbers, got {v!r}", lineno)
    try:
        a, b = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigError(f"bad band {v!r}", lineno) from None
    if not a < b:
        raise ConfigError(f"empty band {v!r}", lineno)
    return a, b


def parse_spec_tokens(tokens: Sequence[str], lineno: int | None = None) -> dict[str, float]:
    from .sim import SPEC_KEYS

    out = {}
    for tok in tokens:
        k, sep, v = tok.partition("=")
        if not sep or k not in SPEC_KEYS:
            raise ConfigError(f"bad spec entry {tok!r}", lineno)
        try:
            out[k] = parse_value(v)
        except ValueError:
            raise ConfigError(f"bad spec value {tok!r}", lineno) from None
    return out


def parse_lock_config(text: str) -> LockConfig:
    """Read a lock configuration.

    ``group A B add=N`` and ``single X add=N`` declare groups; ``seed=``,
    ``perm=random|identity``, ``guard_band=lo,hi``, ``spec k=v ...`` and the
    on/off switches ``prune``, ``drop_desired`` and ``refill`` tune the build.
    ``alarm`` is on, off, or a comma list of transistors whose groups lose
    decoys that flip the gain sign (or, with ``alarm_floor_db``, fall below
    that gain).  ``#`` starts a comment.
    """
    cfg = LockConfig(groups=[])
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        head = toks[0]
        if head in ("group", "single"):
            names = [t for t in toks[1:] if "=" not in t]
            opts = dict(t.split("=", 1) for t in toks[1:] if "=" in t)
            want = 2 if head == "group" else 1
            if len(names) != want:
                raise ConfigError(f"'{head}' takes {want} transistor name(s)", lineno)
            if set(opts) != {"add"}:
                raise ConfigError(f"'{head}' takes only add=N", lineno)
            try:
                add = int(opts["add"])
            except ValueError:
                raise ConfigError(f"bad add count {opts['add']!r}", lineno) from None
            cfg.groups.append(GroupSpec(tuple(names), add))
        elif head == "spec":
            cfg.specs.update(parse_spec_tokens(toks[1:], lineno))
        else:
            for tok in toks:
                k, sep, v = tok.partition("=")
                if not sep:
                    raise ConfigError(f"unrecognised entry {tok!r}", lineno)
                if k == "seed":
                    try:
                        cfg.seed = int(v)
                    except ValueError:
                        raise ConfigError(f"bad seed {v!r}", lineno) from None
                elif k == "perm":
                    if v not in ("random", "identity"):
                        raise ConfigError("perm must be random or identity", lineno)
                    cfg.permute_bits = v == "random"
                elif k == "guard_band":
                    cfg.guard_band = parse_band(v, lineno)
                elif k == "alarm_floor_db":
                    try:
                        cfg.alarm_floor_db = float(v)
                    except ValueError:
                        raise ConfigError(f"bad alarm floor {v!r}", lineno) from None
                elif k == "prune":
                    cfg.prune = _flag(v, lineno)
                elif k == "drop_desired":
                    cfg.drop_desired = _flag(v, lineno)
                elif k == "refill":
                    cfg.refill = _flag(v, lineno)
                elif k == "alarm":
                    if v.lower() in _FLAGS:
                        cfg.alarm_negative_gain = _flag(v, lineno)
                    else:
                        cfg.alarm_negative_gain = True
                        cfg.alarm_scope = tuple(x for x in v.split(",") if x)
                else:
                    raise ConfigError(f"unknown setting {k!r}", lineno)
    if not cfg.groups:
        raise ConfigError("no groups declared")
    return cfg


# ---------------------------------------------------------------- archives

ARCHIVE_FORMAT = "ldelock-archive/1"
KEY_HEADER = (
    "# SECRET KEY: keep away from the fabrication archive.\n"
    "# Anyone holding this file can unlock the design.\n"
)


def archive_dict(locked: LockedNetlist, guard_band=None, specs: Mapping[str, float] | None = None) -> dict:
    """JSON-ready redacted archive; never contains the correct couples."""
    view = locked.redacted()
    return {
        "format": ARCHIVE_FORMAT,
        "netlist": format_netlist(view.base),
        "lde_table": format_table(view.lde),
        "groups": [{"members": list(g.members), "couples": [[a.value for a in c] for c in g.couples]} for g in view.groups],
        "wiring": list(view.bit_perm),
        "keylength": keylength(view),
        "keyspace": keyspace_size(view),
        "guard_band": list(guard_band) if guard_band else None,
        "specs": dict(specs or {}),
    }


def locked_from_archive(d: Mapping) -> LockedNetlist:
    if d.get("format") != ARCHIVE_FORMAT:
        raise ConfigError(f"not an archive (format {d.get('format')!r})")
    groups = tuple(
        ArrangementGroup(tuple(g["members"]), tuple(tuple(Arrangement(a) for a in c) for c in g["couples"]))
        for g in d["groups"]
    )
    return LockedNetlist(parse(d["netlist"]), groups, tuple(d["wiring"]), parse_table(d["lde_table"]))


def key_file_text(locked: LockedNetlist) -> str:
    key = key_for(locked, locked.correct_selection())
    return KEY_HEADER + f"key={key}\n"


def parse_key_file(text: str) -> Key:
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith("key="):
            return Key.parse(line[4:])
        if line:
            return Key.parse(line)
    raise InvalidKey(None, "key file holds no key")


def unlock(view: LockedNetlist, key: Key) -> LockedNetlist:
    """Designer view rebuilt from a redacted archive and the secret key."""
    sel = selection_of(view, key)
    groups = tuple(replace(g, correct_index=s) for g, s in zip(view.groups, sel))
    base = view.base.with_arrangements(arrangements_for(view, sel))
    return replace(view, base=base, groups=groups)
