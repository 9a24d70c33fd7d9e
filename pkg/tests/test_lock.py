import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldelock import lock
from ldelock.lock import (
    ArrangementGroup,
    ConfigError,
    DuplicateMember,
    GroupCollapsed,
    GroupSpec,
    InvalidKey,
    Key,
    LockedNetlist,
    PrunePolicy,
    TooManyCouples,
    UnknownTransistor,
    UnlockableGroup,
    apply_key,
    arrangements_for,
    build_lock,
    key_for,
    keylength,
    keyspace_size,
    parse_lock_config,
    prune,
    raw_patterns,
    selection_of,
)
from ldelock.netlist import Arrangement as A
from ldelock.sim import PerfMetrics, Specs

PAIRS = list(itertools.product(A, repeat=2))


def _group(members, k, correct=0):
    n = len(members)
    universe = list(itertools.product(A, repeat=n))
    return ArrangementGroup(tuple(members), tuple(universe[:k]), correct)


def _locked(ota, table, sizes, perm=None):
    names = [("P1", "P2"), ("P7", "P8"), ("P9", "P10"), ("N7", "N8"), ("N9", "N10"), ("P18", "N18"), ("N17",)]
    groups = tuple(_group(names[i], s) for i, s in enumerate(sizes))
    total = sum(sizes)
    return LockedNetlist(ota, groups, tuple(perm or range(total)), table)


def test_shipped_keyspace_accounting(ota, table):
    added = (3, 4, 6, 4, 8, 3)
    sizes = tuple(a + 1 for a in added) + (2,)
    L = _locked(ota, table, sizes)
    assert keylength(L) == 36
    assert keyspace_size(L) == 50400


def test_single_group_raw_vs_valid(ota, table):
    g = ArrangementGroup(("N17",), ((A.BL,), (A.SP,), (A.SOD,)), 0)
    L = LockedNetlist(ota, (g,), (0, 1, 2), table)
    assert keylength(L) == 3 and raw_patterns(L) == 8
    valid = 0
    for bits in itertools.product((0, 1), repeat=3):
        try:
            selection_of(L, Key(bits))
            valid += 1
        except InvalidKey:
            pass
    assert valid == keyspace_size(L) == 3


def test_two_bits_in_a_group_is_invalid(ota, table):
    L = _locked(ota, table, (4, 5, 7, 5, 9, 4, 2))
    bits = list(key_for(L, (0,) * 7).bits)
    bits[1] = 1
    with pytest.raises(InvalidKey) as e:
        apply_key(L, Key(tuple(bits)))
    assert e.value.group == 0


def test_wrong_length_key(ota, table):
    L = _locked(ota, table, (2, 2))
    with pytest.raises(InvalidKey):
        selection_of(L, Key((1, 0, 1)))


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_permutation_consistency(ota, table, data):
    sizes = (4, 5, 7, 5, 9, 4, 2)
    perm = data.draw(st.permutations(range(sum(sizes))))
    sel = tuple(data.draw(st.integers(0, s - 1)) for s in sizes)
    plain = _locked(ota, table, sizes)
    mixed = _locked(ota, table, sizes, perm)
    assert apply_key(plain, key_for(plain, sel)) == apply_key(mixed, key_for(mixed, sel))
    assert selection_of(mixed, key_for(mixed, sel)) == sel


def test_distinct_selections_give_distinct_maps(ota, table):
    L = _locked(ota, table, (3, 4, 2))
    maps = {tuple(sorted((k, v.value) for k, v in arrangements_for(L, s).items())) for s in itertools.product(range(3), range(4), range(2))}
    assert len(maps) == 24


def test_build_lock_full_pair_group(ota, table):
    L = build_lock(ota, [GroupSpec(("N7", "N8"), 8)], 1, table)
    g = L.groups[0]
    assert set(g.couples) == set(PAIRS)
    assert g.correct == (A.SP, A.SP)


def test_build_lock_places_original(ota, table):
    specs = [GroupSpec(("P1", "P2"), 6), GroupSpec(("N17",), 1)]
    L = build_lock(ota, specs, 5, table)
    assert L.groups[0].correct == (A.SP, A.SP)
    assert L.groups[1].correct == (A.SP,)
    assert len(set(L.groups[0].couples)) == 7
    assert L.sizes == (7, 2)
    assert apply_key(L, key_for(L, L.correct_selection()))["P1"] is A.SP


def test_build_lock_deterministic(ota, table):
    specs = [GroupSpec(("P1", "P2"), 4), GroupSpec(("P9", "P10"), 3)]
    assert build_lock(ota, specs, 9, table) == build_lock(ota, specs, 9, table)
    assert build_lock(ota, specs, 9, table) != build_lock(ota, specs, 10, table)


@pytest.mark.parametrize(
    "spec,exc",
    [
        (GroupSpec(("P1", "P2"), 0), UnlockableGroup),
        (GroupSpec(("P1", "P2"), 9), TooManyCouples),
        (GroupSpec(("N17",), 3), TooManyCouples),
        (GroupSpec(("P1", "NOPE"), 2), UnknownTransistor),
    ],
)
def test_build_lock_errors(ota, table, spec, exc):
    with pytest.raises(exc):
        build_lock(ota, [spec], 1, table)


def test_duplicate_member(ota, table):
    with pytest.raises(DuplicateMember):
        build_lock(ota, [GroupSpec(("P1", "P2"), 2), GroupSpec(("P2", "P3"), 2)], 1, table)


def test_group_invariants():
    with pytest.raises(UnlockableGroup):
        ArrangementGroup(("P1", "P2"), ((A.BL, A.BL),), 0)
    with pytest.raises(lock.LockError):
        ArrangementGroup(("P1", "P2"), ((A.BL, A.BL), (A.BL, A.BL)), 0)
    with pytest.raises(lock.LockError):
        ArrangementGroup(("P1", "P2"), ((A.BL, A.BL), (A.SP, A.BL)), 2)


# ---------------------------------------------------------------- prune


def _fake_evaluator(gains, members=("P1", "P2")):
    """Gain keyed on the couple of ``members``; sign flips on negative entries."""

    calls = []

    def ev(arr):
        couple = tuple(arr[m] for m in members)
        calls.append(couple)
        g = gains.get(couple, 40.0)
        return PerfMetrics(abs(g), -1 if g < 0 else 1, 60.0, 1e3, 1e-3, 1e-4)

    ev.calls = calls
    return ev


def _policy(**kw):
    base = dict(specs=Specs(gain_db_min=70, pm_deg_min=45), guard_band=(67.0, 70.0), seed=3)
    base.update(kw)
    return PrunePolicy(**base)


def _pair_lock(ota, table, couples, correct):
    g = ArrangementGroup(("P1", "P2"), tuple(couples), correct)
    return LockedNetlist(ota, (g,), tuple(range(len(couples))), table)


def test_prune_guard_band_drop(ota, table):
    couples = [(A.SP, A.SP), (A.BL, A.SP), (A.SOD, A.BL)]
    L = _pair_lock(ota, table, couples, 0)
    ev = _fake_evaluator({(A.SP, A.SP): 73.6, (A.BL, A.SP): 68.0})
    out, rep = prune(L, ev, _policy(refill=False))
    (drop,) = rep.dropped
    assert drop.couple == (A.BL, A.SP) and drop.reason == "guard_band" and drop.gain_db == 68.0
    assert out.groups[0].couples == ((A.SP, A.SP), (A.SOD, A.BL))
    assert out.groups[0].correct == (A.SP, A.SP)
    assert (A.SP, A.SP) not in ev.calls  # the correct couple is never judged


def test_prune_alarm_drop(ota, table):
    couples = [(A.BL, A.SP), (A.SP, A.SP), (A.SOD, A.SOD)]
    L = _pair_lock(ota, table, couples, 1)
    ev = _fake_evaluator({(A.BL, A.SP): -20.0})
    out, rep = prune(L, ev, _policy(refill=False))
    assert [(e.couple, e.reason) for e in rep.dropped] == [((A.BL, A.SP), "alarm")]
    assert out.groups[0].correct_index == 0


def test_prune_alarm_scope_and_floor(ota, table):
    couples = [(A.BL, A.SP), (A.SP, A.SP), (A.SOD, A.SOD), (A.BL, A.BL)]
    L = _pair_lock(ota, table, couples, 1)
    ev = _fake_evaluator({(A.BL, A.SP): -20.0, (A.SOD, A.SOD): 40.0, (A.BL, A.BL): 60.0})
    out, rep = prune(L, ev, _policy(refill=False, alarm_scope=("N7",)))
    assert rep.dropped == []
    out, rep = prune(L, ev, _policy(refill=False, alarm_floor_db=50.0))
    assert {e.couple for e in rep.dropped} == {(A.BL, A.SP), (A.SOD, A.SOD)}
    assert out.groups[0].couples == ((A.SP, A.SP), (A.BL, A.BL))


def test_prune_fixpoint(ota, table):
    couples = [(A.SP, A.SP), (A.BL, A.SP), (A.SOD, A.BL)]
    L = _pair_lock(ota, table, couples, 0)
    out, rep = prune(L, _fake_evaluator({}), _policy())
    assert out == L
    assert rep.dropped == []


def test_prune_refill_keeps_size(ota, table):
    couples = [(A.SP, A.SP), (A.BL, A.SP), (A.SOD, A.BL)]
    L = _pair_lock(ota, table, couples, 0)
    out, rep = prune(L, _fake_evaluator({(A.BL, A.SP): 75.0}), _policy())
    assert out.sizes == (3,)
    assert (A.BL, A.SP) not in out.groups[0].couples
    assert [e.action for e in rep.events].count("added") == 1
    assert out.groups[0].correct_index == 0


def test_prune_collapse(ota, table):
    couples = [(A.SP, A.SP), (A.BL, A.SP)]
    L = _pair_lock(ota, table, couples, 0)
    with pytest.raises(GroupCollapsed):
        prune(L, _fake_evaluator({(A.BL, A.SP): 75.0}), _policy(refill=False))


def test_prune_keeps_permutation_bijective(ota, table):
    groups = (
        ArrangementGroup(("P1", "P2"), ((A.SP, A.SP), (A.BL, A.SP), (A.SOD, A.BL), (A.BL, A.BL)), 0),
        ArrangementGroup(("N17",), ((A.BL,), (A.SP,)), 1),
    )
    L = LockedNetlist(ota, groups, (5, 0, 3, 1, 4, 2), table)
    correct_map = arrangements_for(L, L.correct_selection())
    out, _ = prune(L, _fake_evaluator({(A.SOD, A.BL): 68.5}), _policy(refill=False))
    assert sorted(out.bit_perm) == list(range(5))
    assert arrangements_for(out, out.correct_selection()) == correct_map
    # surviving wires keep their relative order
    assert out.bit_perm == (4, 0, 1, 3, 2)


def test_shipped_fixture_sizes(lock36, lock41):
    _, L36, rep36, _, _ = lock36
    assert L36.sizes == (4, 5, 7, 5, 9, 4, 2)
    assert keylength(L36) == 36 and keyspace_size(L36) == 50400
    assert rep36.sizes_before == rep36.sizes_after
    _, L41, rep41, _, _ = lock41
    assert keylength(L41) == 41 and keyspace_size(L41) == 340200
    assert sorted(L41.sizes[:-1]) == [3, 3, 3, 4, 5, 5, 7, 9]
    n7 = L41.groups[[g.members for g in L41.groups].index(("N7", "N8"))]
    assert set(n7.couples) == {(A.BL, A.BL), (A.SP, A.SP), (A.SOD, A.SOD)}


# ---------------------------------------------------------------- config and archives


def test_parse_lock_config():
    cfg = parse_lock_config(
        "seed=4 perm=identity\nguard_band=67,70\nspec gain_db_min=70 power_w_max=2m\n"
        "group P7 P8 add=6  # pair\nsingle N17 add=1\nalarm=N7,N8 alarm_floor_db=0 refill=off\n"
    )
    assert cfg.seed == 4 and not cfg.permute_bits and cfg.guard_band == (67.0, 70.0)
    assert cfg.specs == {"gain_db_min": 70.0, "power_w_max": 2e-3}
    assert cfg.groups == [GroupSpec(("P7", "P8"), 6), GroupSpec(("N17",), 1)]
    assert cfg.alarm_scope == ("N7", "N8") and cfg.alarm_floor_db == 0.0 and not cfg.refill


@pytest.mark.parametrize(
    "text,line",
    [
        ("group P1 add=2\n", 1),
        ("group P1 P2 add=x\n", 1),
        ("group P1 P2 add=2\nbogus=1\n", 2),
        ("group P1 P2 add=2\nguard_band=70,67\n", 2),
        ("group P1 P2 add=2\nspec foo=1\n", 2),
        ("seed=1\n", None),
    ],
)
def test_bad_lock_configs(text, line):
    with pytest.raises(ConfigError) as e:
        parse_lock_config(text)
    assert e.value.line == line


def test_archive_round_trip(lock36):
    _, L, _, cfg, specs = lock36
    d = lock.archive_dict(L, cfg.guard_band, specs.as_dict())
    text = json.dumps(d)
    view = lock.locked_from_archive(json.loads(text))
    assert view == L.redacted()
    assert view.is_redacted
    for name in L.grouped:
        assert view.base.device(name).arrangement is A.BL
    key_text = lock.key_file_text(L)
    key = lock.parse_key_file(key_text)
    assert str(key) not in text
    assert key_text.startswith("# SECRET KEY")
    restored = lock.unlock(view, key)
    assert restored.correct_selection() == L.correct_selection()
    assert restored.base == L.base


def test_redacted_view_hides_correct(lock36):
    _, L, _, _, _ = lock36
    view = L.redacted()
    assert all(g.correct_index is None for g in view.groups)
    assert "correct" not in json.dumps(lock.archive_dict(L, (94.25, 102.0), {}))
