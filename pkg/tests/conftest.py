from importlib import resources

import pytest

from ldelock import ldemodel, lock, netlist, sim


def data_text(name: str) -> str:
    return resources.files("ldelock.data").joinpath(name).read_text(encoding="utf-8")


def data_path(name: str) -> str:
    return str(resources.files("ldelock.data").joinpath(name))


@pytest.fixture(scope="session")
def table():
    return ldemodel.default_table()


@pytest.fixture(scope="session")
def ota():
    return netlist.parse(data_text("ota.cir"))


def make_lock(net, tab, cfg_name):
    cfg = lock.parse_lock_config(data_text(cfg_name))
    raw = lock.build_lock(net, cfg.groups, cfg.seed, tab, cfg.permute_bits)
    specs = sim.Specs.from_mapping({**net.spec_dict(), **cfg.specs})
    ev = sim.Evaluator(net, tab, raw.reference_arrangements())
    pruned, report = lock.prune(raw, ev, cfg.policy(specs, cfg.seed))
    return raw, pruned, report, cfg, specs


@pytest.fixture(scope="session")
def lock36(ota, table):
    return make_lock(ota, table, "lock36.cfg")


@pytest.fixture(scope="session")
def lock41(ota, table):
    return make_lock(ota, table, "lock41.cfg")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
