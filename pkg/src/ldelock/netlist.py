"""SPICE-subset netlist: parsing, validation, canonical printing.

Grammar (one element per line, keywords case-insensitive)::

    * comment
    Rname n+ n- value
    Cname n+ n- value
    Vname n+ n- DC v [AC mag [phase_deg]]
    Iname n+ n- DC i [AC mag [phase_deg]]
    Mname d g s b KIND FLAVOR W=... L=... [NF=...] [MULT=...] [ARR=BL|SP|SOD]
    .model KIND FLAVOR [KP=...] [VTH0=...] [LAMBDA=...]
    .ac dec points fstart fstop
    .spec gain_db_min=... pm_deg_min=... power_w_max=... ...
    .probe out=node [in=source] [gm=device] [branches=dev1,dev2,...]
    .end

MOSFET names may also start with N or P (``P7 d g s b PMOS SVT ...``).
Values accept the suffixes f p n u m k meg g t; trailing letters after the
suffix are ignored (``10uF``, ``1kohm``).  The first line is the title only
when it starts with ``*``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

GROUND = "0"


class DeviceKind(enum.Enum):
    NMOS = "NMOS"
    PMOS = "PMOS"

    @property
    def polarity(self) -> float:
        return 1.0 if self is DeviceKind.NMOS else -1.0


class VtFlavor(enum.Enum):
    HVT = "HVT"
    SVT = "SVT"
    LVT = "LVT"


class Arrangement(enum.Enum):
    BL = "BL"
    SP = "SP"
    SOD = "SOD"


class NetlistError(ValueError):
    """Base class for netlist problems; carries an optional source position."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = f"line {line}, col {col}: " if line is not None else ""
        super().__init__(where + message)


class NetlistSyntaxError(NetlistError):
    pass


class DanglingNode(NetlistError):
    def __init__(self, name: str, line: int | None = None, col: int | None = None):
        self.name = name
        super().__init__(f"dangling node {name!r}", line, col)


class DuplicateDevice(NetlistError):
    def __init__(self, name: str, line: int | None = None, col: int | None = None):
        self.name = name
        super().__init__(f"duplicate device {name!r}", line, col)


class MissingGround(NetlistError):
    def __init__(self):
        super().__init__("netlist has no ground node '0'")


@dataclass(frozen=True)
class ModelCard:
    kfactor: float  # A/V^2 per unit W/L
    vth0: float  # magnitude, sign applied by kind
    lam: float = 0.0

    def __post_init__(self):
        if self.kfactor <= 0:
            raise NetlistError(f"kfactor must be positive, got {self.kfactor}")
        if self.vth0 < 0:
            raise NetlistError("vth0 is stored as a magnitude and must be >= 0")
        if self.lam < 0:
            raise NetlistError("lambda must be >= 0")


# Simplified level-1 cards, loosely 65 nm-like at the typical corner.
DEFAULT_MODELS: dict[tuple[DeviceKind, VtFlavor], ModelCard] = {
    (DeviceKind.NMOS, VtFlavor.HVT): ModelCard(300e-6, 0.50, 0.08),
    (DeviceKind.NMOS, VtFlavor.SVT): ModelCard(300e-6, 0.40, 0.08),
    (DeviceKind.NMOS, VtFlavor.LVT): ModelCard(300e-6, 0.30, 0.08),
    (DeviceKind.PMOS, VtFlavor.HVT): ModelCard(100e-6, 0.50, 0.08),
    (DeviceKind.PMOS, VtFlavor.SVT): ModelCard(100e-6, 0.40, 0.08),
    (DeviceKind.PMOS, VtFlavor.LVT): ModelCard(100e-6, 0.30, 0.08),
}


@dataclass(frozen=True)
class Mosfet:
    name: str
    drain: str
    gate: str
    source: str
    bulk: str
    kind: DeviceKind
    flavor: VtFlavor
    width: float
    length: float
    fingers: int = 1
    # drive multiplier left behind by finger flattening (total drive at BL)
    mult: float = 1.0
    arrangement: Arrangement = Arrangement.BL
    line: int | None = field(default=None, compare=False)
    col: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.width > 0 or not self.length > 0:
            raise NetlistError(f"{self.name}: W and L must be positive", self.line, self.col)
        if self.fingers < 1:
            raise NetlistError(f"{self.name}: NF must be >= 1", self.line, self.col)
        if not self.mult > 0:
            raise NetlistError(f"{self.name}: MULT must be positive", self.line, self.col)

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.drain, self.gate, self.source, self.bulk)


@dataclass(frozen=True)
class Resistor:
    name: str
    pos: str
    neg: str
    ohms: float
    line: int | None = field(default=None, compare=False)
    col: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.ohms > 0:
            raise NetlistError(f"{self.name}: resistance must be positive", self.line, self.col)

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.pos, self.neg)


@dataclass(frozen=True)
class Capacitor:
    name: str
    pos: str
    neg: str
    farads: float
    line: int | None = field(default=None, compare=False)
    col: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.farads > 0:
            raise NetlistError(f"{self.name}: capacitance must be positive", self.line, self.col)

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.pos, self.neg)


@dataclass(frozen=True)
class VSource:
    name: str
    pos: str
    neg: str
    dc: float = 0.0
    ac_mag: float = 0.0
    ac_phase: float = 0.0
    line: int | None = field(default=None, compare=False)
    col: int | None = field(default=None, compare=False)

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.pos, self.neg)


@dataclass(frozen=True)
class ISource:
    """Current flows from ``pos`` through the source to ``neg`` (SPICE convention)."""

    name: str
    pos: str
    neg: str
    dc: float = 0.0
    ac_mag: float = 0.0
    ac_phase: float = 0.0
    line: int | None = field(default=None, compare=False)
    col: int | None = field(default=None, compare=False)

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.pos, self.neg)


Device = Union[Mosfet, Resistor, Capacitor, VSource, ISource]


@dataclass(frozen=True)
class AcSettings:
    points_per_decade: int = 10
    fstart: float = 1.0
    fstop: float = 10e9


@dataclass(frozen=True)
class Probe:
    out: str | None = None
    source: str | None = None
    gm_device: str | None = None
    branches: tuple[str, ...] = ()


@dataclass(frozen=True)
class Netlist:
    title: str
    devices: tuple[Device, ...]
    models: tuple[tuple[tuple[DeviceKind, VtFlavor], ModelCard], ...] = ()
    ac: AcSettings = AcSettings()
    specs: tuple[tuple[str, float], ...] = ()
    probe: Probe = Probe()

    @property
    def nodes(self) -> list[str]:
        """Nodes in first-appearance order, ground included."""
        seen: dict[str, None] = {}
        for dev in self.devices:
            for n in dev.nodes:
                seen.setdefault(n, None)
        return list(seen)

    @property
    def mosfets(self) -> list[Mosfet]:
        return [d for d in self.devices if isinstance(d, Mosfet)]

    def device(self, name: str) -> Device:
        for d in self.devices:
            if d.name.upper() == name.upper():
                return d
        raise KeyError(name)

    def model_for(self, m: Mosfet) -> ModelCard:
        overrides = dict(self.models)
        return overrides.get((m.kind, m.flavor), DEFAULT_MODELS[(m.kind, m.flavor)])

    def spec_dict(self) -> dict[str, float]:
        return dict(self.specs)

    def with_arrangements(self, arrangements: dict[str, Arrangement]) -> "Netlist":
        devs = tuple(
            replace(d, arrangement=arrangements[d.name])
            if isinstance(d, Mosfet) and d.name in arrangements
            else d
            for d in self.devices
        )
        return replace(self, devices=devs)


_SUFFIX = {
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "meg": 1e6,
    "g": 1e9,
    "t": 1e12,
}
_NUMBER = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[fpnumkgt])?([a-z]*)$", re.I)


def parse_value(token: str, line: int | None = None, col: int | None = None) -> float:
    m = _NUMBER.match(token)
    if not m:
        raise NetlistSyntaxError(f"bad numeric value {token!r}", line, col)
    value = float(m.group(1))
    if m.group(2):
        value *= _SUFFIX[m.group(2).lower()]
    return value


class _Tokens:
    """Whitespace tokens of one line with 1-based columns."""

    def __init__(self, text: str, lineno: int):
        self.lineno = lineno
        self.items = [(m.group(0), m.start() + 1) for m in re.finditer(r"\S+", text)]

    def __len__(self):
        return len(self.items)

    def tok(self, i: int) -> str:
        return self.items[i][0]

    def col(self, i: int) -> int:
        return self.items[i][1] if i < len(self.items) else (self.items[-1][1] if self.items else 1)

    def need(self, n: int, what: str):
        if len(self.items) < n:
            raise NetlistSyntaxError(f"{what}: expected at least {n} fields", self.lineno, self.col(len(self.items)))

    def value(self, i: int) -> float:
        return parse_value(self.tok(i), self.lineno, self.col(i))

    def params(self, start: int) -> dict[str, tuple[str, int]]:
        out = {}
        for i in range(start, len(self.items)):
            tok, col = self.items[i]
            if "=" not in tok:
                raise NetlistSyntaxError(f"expected key=value, got {tok!r}", self.lineno, col)
            k, v = tok.split("=", 1)
            out[k.lower()] = (v, col)
        return out


def _parse_source(t: _Tokens, cls):
    t.need(3, "source")
    name = t.tok(0)
    dc = ac_mag = ac_phase = 0.0
    i = 3
    if i < len(t) and t.tok(i).upper() == "DC":
        t.need(i + 2, name)
        dc = t.value(i + 1)
        i += 2
    elif i < len(t) and t.tok(i).upper() != "AC":
        dc = t.value(i)
        i += 1
    if i < len(t):
        if t.tok(i).upper() != "AC":
            raise NetlistSyntaxError(f"unexpected token {t.tok(i)!r}", t.lineno, t.col(i))
        t.need(i + 2, name)
        ac_mag = t.value(i + 1)
        i += 2
        if i < len(t):
            ac_phase = t.value(i)
            i += 1
    if i < len(t):
        raise NetlistSyntaxError(f"unexpected token {t.tok(i)!r}", t.lineno, t.col(i))
    return cls(name, t.tok(1), t.tok(2), dc, ac_mag, ac_phase, line=t.lineno, col=t.col(0))


def _enum(enum_cls, t: _Tokens, i: int):
    try:
        return enum_cls(t.tok(i).upper())
    except ValueError:
        choices = "/".join(e.value for e in enum_cls)
        raise NetlistSyntaxError(f"expected one of {choices}, got {t.tok(i)!r}", t.lineno, t.col(i)) from None


def _parse_mosfet(t: _Tokens) -> Mosfet:
    t.need(7, "mosfet")
    kind = _enum(DeviceKind, t, 5)
    flavor = _enum(VtFlavor, t, 6)
    params = t.params(7)
    unknown = set(params) - {"w", "l", "nf", "mult", "arr"}
    if unknown:
        k = sorted(unknown)[0]
        raise NetlistSyntaxError(f"unknown MOSFET parameter {k!r}", t.lineno, params[k][1])
    for req in ("w", "l"):
        if req not in params:
            raise NetlistSyntaxError(f"MOSFET {t.tok(0)} missing {req.upper()}=", t.lineno, t.col(0))

    def num(k, default):
        if k not in params:
            return default
        v, c = params[k]
        return parse_value(v, t.lineno, c)

    nf = num("nf", 1.0)
    if nf != int(nf):
        raise NetlistSyntaxError("NF must be an integer", t.lineno, params["nf"][1])
    arr = Arrangement.BL
    if "arr" in params:
        v, c = params["arr"]
        try:
            arr = Arrangement(v.upper())
        except ValueError:
            raise NetlistSyntaxError(f"bad arrangement {v!r}", t.lineno, c) from None
    return Mosfet(
        t.tok(0), t.tok(1), t.tok(2), t.tok(3), t.tok(4), kind, flavor,
        width=num("w", None), length=num("l", None), fingers=int(nf), mult=num("mult", 1.0),
        arrangement=arr, line=t.lineno, col=t.col(0),
    )


def parse(text: str) -> Netlist:
    """Parse and validate netlist source text."""
    lines = text.splitlines()
    title = ""
    devices: list[Device] = []
    models: dict[tuple[DeviceKind, VtFlavor], ModelCard] = {}
    ac = AcSettings()
    specs: dict[str, float] = {}
    probe = Probe()
    for lineno, raw in enumerate(lines, start=1):
        body = raw.strip()
        if not body:
            continue
        if body.startswith("*"):
            if lineno == 1:
                title = body[1:].strip()
            continue
        t = _Tokens(raw, lineno)
        head = t.tok(0)
        letter = head[0].upper()
        if head.startswith("."):
            directive = head.lower()
            if directive == ".end":
                break
            if directive == ".model":
                t.need(3, ".model")
                key = (_enum(DeviceKind, t, 1), _enum(VtFlavor, t, 2))
                p = t.params(3)
                base = models.get(key, DEFAULT_MODELS[key])
                vals = {k: parse_value(v, lineno, c) for k, (v, c) in p.items()}
                bad = set(vals) - {"kp", "vth0", "lambda"}
                if bad:
                    raise NetlistSyntaxError(f"unknown model parameter {sorted(bad)[0]!r}", lineno, t.col(3))
                models[key] = ModelCard(
                    vals.get("kp", base.kfactor), vals.get("vth0", base.vth0), vals.get("lambda", base.lam)
                )
            elif directive == ".ac":
                t.need(5, ".ac")
                if t.tok(1).lower() != "dec":
                    raise NetlistSyntaxError("only 'dec' sweeps are supported", lineno, t.col(1))
                pts = t.value(2)
                if pts < 2 or pts != int(pts):
                    raise NetlistSyntaxError("points per decade must be an integer >= 2", lineno, t.col(2))
                fstart, fstop = t.value(3), t.value(4)
                if not 0 < fstart < fstop:
                    raise NetlistSyntaxError("need 0 < fstart < fstop", lineno, t.col(3))
                ac = AcSettings(int(pts), fstart, fstop)
            elif directive == ".spec":
                for k, (v, c) in t.params(1).items():
                    specs[k] = parse_value(v, lineno, c)
            elif directive == ".probe":
                p = t.params(1)
                bad = set(p) - {"out", "in", "gm", "branches"}
                if bad:
                    raise NetlistSyntaxError(f"unknown probe field {sorted(bad)[0]!r}", lineno, t.col(1))
                probe = Probe(
                    out=p["out"][0] if "out" in p else probe.out,
                    source=p["in"][0] if "in" in p else probe.source,
                    gm_device=p["gm"][0] if "gm" in p else probe.gm_device,
                    branches=tuple(b for b in p["branches"][0].split(",") if b) if "branches" in p else probe.branches,
                )
            else:
                raise NetlistSyntaxError(f"unknown directive {head!r}", lineno, t.col(0))
            continue
        if letter in "RC":
            t.need(4, "two-terminal element")
            if len(t) > 4:
                raise NetlistSyntaxError(f"unexpected token {t.tok(4)!r}", lineno, t.col(4))
            cls = Resistor if letter == "R" else Capacitor
            devices.append(cls(head, t.tok(1), t.tok(2), t.value(3), line=lineno, col=t.col(0)))
        elif letter == "V":
            devices.append(_parse_source(t, VSource))
        elif letter == "I":
            devices.append(_parse_source(t, ISource))
        elif letter == "M" or (letter in "NP" and len(t) > 5 and t.tok(5).upper() in ("NMOS", "PMOS")):
            devices.append(_parse_mosfet(t))
        else:
            raise NetlistSyntaxError(f"unknown element {head!r}", lineno, t.col(0))

    net = Netlist(
        title=title,
        devices=tuple(devices),
        models=tuple(sorted(models.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value))),
        ac=ac,
        specs=tuple(specs.items()),
        probe=probe,
    )
    validate(net)
    return net


def read(path: str | Path) -> Netlist:
    return parse(Path(path).read_text(encoding="utf-8"))


def validate(net: Netlist) -> None:
    """Raise on duplicate names, missing ground, dangling nodes or bad probes."""
    names: set[str] = set()
    for d in net.devices:
        key = d.name.upper()
        if key in names:
            raise DuplicateDevice(d.name, d.line, d.col)
        names.add(key)
    uses: dict[str, list[Device]] = {}
    for d in net.devices:
        for n in d.nodes:
            uses.setdefault(n, []).append(d)
    if GROUND not in uses:
        raise MissingGround()
    for n, devs in uses.items():
        if n != GROUND and len(devs) < 2:
            raise DanglingNode(n, devs[0].line, devs[0].col)
    p = net.probe
    if p.out is not None and p.out not in uses:
        raise NetlistError(f".probe out={p.out} is not a node")
    for dev_name in [p.source, p.gm_device, *p.branches]:
        if dev_name is not None and dev_name.upper() not in names:
            raise NetlistError(f".probe refers to unknown device {dev_name!r}")


def node_index(net: Netlist) -> dict[str, int]:
    """Dense indices for non-ground nodes, in first-appearance order.

    Ground is excluded; callers treat a missing key as the ground sentinel -1.
    """
    return {n: i for i, n in enumerate(n for n in net.nodes if n != GROUND)}


def flatten_fingers(net: Netlist) -> Netlist:
    """Turn every multi-finger MOSFET into a single finger of the same W and L.

    The finger count moves into ``mult`` so the device keeps its BL drive.
    """
    devs = tuple(
        replace(d, fingers=1, mult=d.mult * d.fingers) if isinstance(d, Mosfet) and d.fingers > 1 else d
        for d in net.devices
    )
    return replace(net, devices=devs)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_device(d: Device) -> str:
    if isinstance(d, Mosfet):
        s = (
            f"{d.name} {d.drain} {d.gate} {d.source} {d.bulk} {d.kind.value} {d.flavor.value} "
            f"W={_fmt(d.width)} L={_fmt(d.length)}"
        )
        if d.fingers != 1:
            s += f" NF={d.fingers}"
        if d.mult != 1.0:
            s += f" MULT={_fmt(d.mult)}"
        if d.arrangement is not Arrangement.BL:
            s += f" ARR={d.arrangement.value}"
        return s
    if isinstance(d, Resistor):
        return f"{d.name} {d.pos} {d.neg} {_fmt(d.ohms)}"
    if isinstance(d, Capacitor):
        return f"{d.name} {d.pos} {d.neg} {_fmt(d.farads)}"
    s = f"{d.name} {d.pos} {d.neg} DC {_fmt(d.dc)}"
    if d.ac_mag or d.ac_phase:
        s += f" AC {_fmt(d.ac_mag)} {_fmt(d.ac_phase)}"
    return s


def format_netlist(net: Netlist) -> str:
    """Canonical text form; ``parse(format_netlist(n)) == n``."""
    out = [f"* {net.title}"]
    for (kind, flavor), card in net.models:
        out.append(
            f".model {kind.value} {flavor.value} KP={_fmt(card.kfactor)} VTH0={_fmt(card.vth0)} LAMBDA={_fmt(card.lam)}"
        )
    out.extend(format_device(d) for d in net.devices)
    out.append(f".ac dec {net.ac.points_per_decade} {_fmt(net.ac.fstart)} {_fmt(net.ac.fstop)}")
    if net.specs:
        out.append(".spec " + " ".join(f"{k}={_fmt(v)}" for k, v in net.specs))
    p = net.probe
    fields = []
    if p.out is not None:
        fields.append(f"out={p.out}")
    if p.source is not None:
        fields.append(f"in={p.source}")
    if p.gm_device is not None:
        fields.append(f"gm={p.gm_device}")
    if p.branches:
        fields.append("branches=" + ",".join(p.branches))
    if fields:
        out.append(".probe " + " ".join(fields))
    out.append(".end")
    return "\n".join(out) + "\n"
