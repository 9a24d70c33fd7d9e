"""Attack harnesses against a locked design, driven through a metered oracle.

Attacks never see the correct couples: they receive an :class:`AttackView`
holding the visible structure (groups, couples, which key wires belong to
which group) and talk to the chip only through :class:`Oracle`.
"""
from __future__ import annotations

import itertools
import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .lock import (
    Couple,
    InvalidKey,
    Key,
    LockedNetlist,
    Selection,
    arrangements_for,
    keylength,
    selection_of,
)
from .netlist import Arrangement
from .sim import Evaluator, PerfMetrics, SimOptions, Specs


class UnknownAttack(ValueError):
    pass


@dataclass(frozen=True)
class AttackView:
    """What an attacker holding the fabrication archive can see."""

    members: tuple[tuple[str, ...], ...]
    couples: tuple[tuple[Couple, ...], ...]
    group_bits: tuple[tuple[int, ...], ...]  # sorted physical wires per group
    wiring: tuple[int, ...] | None  # logical->physical map, only when it is evident
    transistors: tuple[str, ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.couples)

    @property
    def keylength(self) -> int:
        return sum(self.sizes)

    @property
    def keyspace(self) -> int:
        return math.prod(self.sizes)

    def key(self, choice: Sequence[int]) -> Key:
        """Key setting wire ``group_bits[g][choice[g]]`` of every group."""
        bits = [0] * self.keylength
        for wires, c in zip(self.group_bits, choice):
            bits[wires[c]] = 1
        return Key(tuple(bits))

    def choice_for_couple(self, g: int, couple: Couple) -> int | None:
        """Wire index selecting ``couple`` in group ``g``, if the wiring is known."""
        if self.wiring is None or couple not in self.couples[g]:
            return None
        off = sum(self.sizes[:g])
        phys = self.wiring[off + self.couples[g].index(couple)]
        return self.group_bits[g].index(phys)


def attack_view(locked: LockedNetlist) -> AttackView:
    view = locked.redacted()
    offs = view.offsets()
    group_bits = tuple(
        tuple(sorted(view.bit_perm[o + i] for i in range(g.size))) for g, o in zip(view.groups, offs)
    )
    identity = view.bit_perm == tuple(range(keylength(view)))
    return AttackView(
        members=tuple(g.members for g in view.groups),
        couples=tuple(g.couples for g in view.groups),
        group_bits=group_bits,
        wiring=view.bit_perm if identity else None,
        transistors=tuple(m.name for m in view.base.mosfets),
    )


class Oracle:
    """A working chip: answers metric and spec queries for any key, counting each.

    ``cache`` (selection -> metrics, e.g. from a sweep) avoids re-simulating
    but every query is still counted.
    """

    def __init__(
        self,
        unlocked: LockedNetlist,
        specs: Specs,
        opts: SimOptions | None = None,
        blind: bool = False,
        cache: Mapping[Selection, PerfMetrics | None] | None = None,
    ):
        if unlocked.is_redacted:
            raise ValueError("the oracle needs the unlocked design")
        self._locked = unlocked
        self._specs = specs
        self._eval = Evaluator(unlocked.base, None if blind else unlocked.lde, unlocked.reference_arrangements(), opts)
        self._cache = dict(cache or {})
        self._lock = threading.Lock()
        self._queries = 0

    @property
    def queries(self) -> int:
        return self._queries

    def _count(self):
        with self._lock:
            self._queries += 1

    def _metrics(self, sel: Selection) -> PerfMetrics | None:
        if sel not in self._cache:
            self._cache[sel] = self._eval(arrangements_for(self._locked, sel))
        return self._cache[sel]

    def measure(self, key: Key) -> PerfMetrics | None:
        self._count()
        try:
            sel = selection_of(self._locked, key)
        except InvalidKey:
            return None
        return self._metrics(sel)

    def spec_check(self, key: Key) -> bool:
        self._count()
        try:
            sel = selection_of(self._locked, key)
        except InvalidKey:
            return False
        return self._specs.met(self._metrics(sel))

    def reference(self) -> PerfMetrics | None:
        """Measurement of the activated chip bought on the market."""
        self._count()
        return self._metrics(self._locked.correct_selection())


@dataclass
class AttackReport:
    attack: str
    queries: int
    success: bool
    candidates_phase1: int | None = None
    successes_phase2: int | None = None
    fraction_removed: float | None = None
    seed: int | None = None
    elapsed_s: float = 0.0
    recovered_key: str | None = None
    notes: str = ""
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _order(view: AttackView, order: str, seed: int | None) -> Iterable[tuple[int, ...]]:
    if order == "canonical":
        return itertools.product(*(range(s) for s in view.sizes))
    if order == "random":
        if seed is None:
            raise ValueError("random order needs a seed")
        rng = np.random.default_rng(seed)
        idx = rng.permutation(view.keyspace)
        return (tuple(int(v) for v in np.unravel_index(int(i), view.sizes)) for i in idx)
    raise ValueError(f"unknown order {order!r}")


def brute_force(
    view: AttackView, oracle: Oracle, budget: int, order: str = "canonical", seed: int | None = None
) -> AttackReport:
    """Try valid keys until one meets every spec or the budget runs out."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    t0 = time.perf_counter()
    used = 0
    found = None
    for choice in itertools.islice(_order(view, order, seed), budget):
        key = view.key(choice)
        used += 1
        if oracle.spec_check(key):
            found = key
            break
    return AttackReport(
        "brute_force",
        used,
        found is not None,
        seed=seed,
        elapsed_s=time.perf_counter() - t0,
        recovered_key=None if found is None else str(found),
        notes=f"order={order} budget={budget}",
    )


@dataclass(frozen=True)
class SubcircuitTarget:
    transistors: tuple[str, ...]
    metric: str = "gm_s"
    tolerance: float = 0.02
    target_value: float | None = None  # None: measure the working chip

    def __post_init__(self):
        if not self.transistors:
            raise ValueError("target subset is empty")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")


def divide_and_conquer(view: AttackView, oracle: Oracle, target: SubcircuitTarget, seed: int = 0) -> AttackReport:
    """Solve the subcircuit alone, then check survivors against the full spec.

    Phase 1 enumerates the groups touching the subset with every other group
    held at one seed-chosen wire, keeping candidates whose metric lands within
    tolerance of the target.  Phase 2 spec-checks each survivor.
    """
    t0 = time.perf_counter()
    grouped = {m for ms in view.members for m in ms}
    missing = [t for t in target.transistors if t not in grouped]
    if missing:
        raise ValueError(f"transistor(s) {', '.join(missing)} are not in any group")
    q0 = oracle.queries
    local = [g for g, ms in enumerate(view.members) if any(m in target.transistors for m in ms)]
    rng = np.random.default_rng(seed)
    fixed = [int(rng.integers(s)) for s in view.sizes]
    goal = target.target_value
    if goal is None:
        ref = oracle.reference()
        goal = getattr(ref, target.metric)
    survivors = []
    for combo in itertools.product(*(range(view.sizes[g]) for g in local)):
        choice = list(fixed)
        for g, c in zip(local, combo):
            choice[g] = c
        m = oracle.measure(view.key(choice))
        if m is None:
            continue
        value = getattr(m, target.metric)
        if math.isinf(target.tolerance) or abs(value - goal) <= target.tolerance * abs(goal):
            survivors.append(tuple(choice))
    successes = [c for c in survivors if oracle.spec_check(view.key(c))]
    best = successes[0] if successes else None
    return AttackReport(
        "divide_and_conquer",
        oracle.queries - q0,
        bool(successes),
        candidates_phase1=len(survivors),
        successes_phase2=len(successes),
        seed=seed,
        elapsed_s=time.perf_counter() - t0,
        recovered_key=None if best is None else str(view.key(best)),
        notes=f"subset={','.join(target.transistors)} metric={target.metric} tol={target.tolerance}",
        extra={"local_groups": local, "target_value": goal},
    )


def removal_fraction(view: AttackView) -> float:
    """Share of the design's transistors that sit in some group."""
    if not view.transistors:
        return 0.0
    grouped = {m for ms in view.members for m in ms}
    return len(grouped & set(view.transistors)) / len(view.transistors)


def removal(view: AttackView) -> AttackReport:
    return AttackReport("removal", 0, False, fraction_removed=removal_fraction(view))


def naive_guess(
    view: AttackView, oracle: Oracle, guesses: Sequence[Arrangement | Mapping[str, Arrangement]], seed: int = 0
) -> AttackReport:
    """Try structural guesses such as "every device is BL".

    A guess names an arrangement per transistor (or one for all).  Where the
    wiring hides which wire selects the guessed couple, or the couple is not
    offered, that group falls back to a random wire.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    q0 = oracle.queries
    hits = 0
    first = None
    mapped = 0
    for guess in guesses:
        choice = []
        for g, ms in enumerate(view.members):
            if isinstance(guess, Arrangement):
                couple = tuple(guess for _ in ms)
            else:
                couple = tuple(guess.get(m, Arrangement.BL) for m in ms)
            c = view.choice_for_couple(g, couple)
            if c is None:
                c = int(rng.integers(view.sizes[g]))
            else:
                mapped += 1
            choice.append(c)
        key = view.key(choice)
        if oracle.spec_check(key):
            hits += 1
            first = first or key
    n = len(guesses)
    return AttackReport(
        "naive_guess",
        oracle.queries - q0,
        hits > 0,
        seed=seed,
        elapsed_s=time.perf_counter() - t0,
        recovered_key=None if first is None else str(first),
        notes=f"{hits}/{n} guesses met spec",
        extra={"guesses": n, "hits": hits, "success_rate": hits / n if n else 0.0, "groups_mapped": mapped},
    )


ATTACKS = ("brute_force", "divide_and_conquer", "removal", "naive_guess")
