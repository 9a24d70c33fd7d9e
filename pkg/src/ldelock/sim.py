"""DC operating point, AC small-signal sweep and OTA metric extraction.

Modified nodal analysis over node voltages plus one branch current per
voltage source.  MOSFETs use a level-1 square law with channel-length
modulation, evaluated for all devices at once with numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ldemodel import EffectiveParams, circuit_params
from .netlist import (
    GROUND,
    Capacitor,
    DeviceKind,
    ISource,
    Mosfet,
    Netlist,
    Resistor,
    VSource,
    node_index,
)


class SimulationError(RuntimeError):
    pass


class SingularSystem(SimulationError):
    def __init__(self, message: str, frequency: float | None = None):
        self.frequency = frequency
        super().__init__(message if frequency is None else f"{message} at f={frequency:g} Hz")


class NoConvergence(SimulationError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"DC solve did not converge after {iterations} iterations (residual {residual:.3g} A)")


class NoUnityCrossing(SimulationError):
    pass


@dataclass(frozen=True)
class SimOptions:
    dc_tol: float = 1e-9
    max_newton_iters: int = 200
    gmin: float = 1e-12
    gmin_start: float = 1e-3
    gmin_steps_per_decade: int = 1
    max_step_v: float = 0.5
    cgs_per_width: float = 1e-9  # F/m, i.e. 1 fF/um
    cgd_per_width: float = 1e-9
    points_per_decade: int | None = None  # None: take the netlist's .ac line
    fstart: float | None = None
    fstop: float | None = None

    def __post_init__(self):
        if not self.dc_tol > 0:
            raise ValueError("dc_tol must be positive")
        if self.gmin < 0:
            raise ValueError("gmin must be >= 0")


@dataclass
class DcSolution:
    node_voltages: dict[str, float]
    device_currents: dict[str, float]
    converged: bool
    iterations: int
    residual: float
    x: np.ndarray = field(repr=False)
    gm: dict[str, float] = field(default_factory=dict, repr=False)

    def require(self) -> "DcSolution":
        if not self.converged:
            raise NoConvergence(self.residual, self.iterations)
        return self


@dataclass
class AcResponse:
    frequencies: np.ndarray
    transfer: np.ndarray


@dataclass
class PerfMetrics:
    gain_db: float
    gain_sign: int
    phase_margin_deg: float | None
    bw_3db_hz: float
    power_w: float
    gm_s: float
    branch_currents: dict[str, float] = field(default_factory=dict)
    bw_saturated: bool = False

    @property
    def pm_defined(self) -> bool:
        return self.phase_margin_deg is not None


SPEC_KEYS = ("gain_db_min", "pm_deg_min", "power_w_max", "power_w_min", "bw_hz_min")


@dataclass(frozen=True)
class Specs:
    """Acceptance window for a key; unset bounds are not checked."""

    gain_db_min: float | None = None
    pm_deg_min: float | None = None
    power_w_max: float | None = None
    power_w_min: float | None = None
    bw_hz_min: float | None = None

    @classmethod
    def from_mapping(cls, d: Mapping[str, float]) -> "Specs":
        unknown = set(d) - set(SPEC_KEYS)
        if unknown:
            raise ValueError(f"unknown spec key(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in d.items()})

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in SPEC_KEYS if getattr(self, k) is not None}

    def met(self, m: "PerfMetrics | None") -> bool:
        if m is None or m.gain_sign <= 0:
            return False
        if self.gain_db_min is not None and not m.gain_db >= self.gain_db_min:
            return False
        if self.pm_deg_min is not None and not (m.pm_defined and m.phase_margin_deg >= self.pm_deg_min):
            return False
        if self.power_w_max is not None and not m.power_w <= self.power_w_max:
            return False
        if self.power_w_min is not None and not m.power_w >= self.power_w_min:
            return False
        if self.bw_hz_min is not None and not m.bw_3db_hz >= self.bw_hz_min:
            return False
        return True


# ---------------------------------------------------------------- device model


def _level1(vgs, vds, vth, k, lam):
    """Square law for vds >= 0; returns (id, gm, gds) arrays."""
    vov = vgs - vth
    on = vov > 0.0
    vov = np.where(on, vov, 0.0)
    clm = 1.0 + lam * vds
    sat = vds >= vov
    q_tri = vov * vds - 0.5 * vds * vds
    i = np.where(sat, 0.5 * k * vov * vov * clm, k * q_tri * clm)
    gm = np.where(sat, k * vov * clm, k * vds * clm)
    gds = np.where(sat, 0.5 * k * vov * vov * lam, k * (vov - vds) * clm + k * q_tri * lam)
    return i, gm, gds


def _mos_terminal(vgs, vds, vth, k, lam, pol):
    """Drain current (into drain) and its partials w.r.t. vgs and vds.

    ``pol`` is +1 for NMOS and -1 for PMOS; reversed vds swaps the roles of
    drain and source.
    """
    vgs_n = pol * vgs
    vds_n = pol * vds
    rev = vds_n < 0.0
    vg_eff = np.where(rev, vgs_n - vds_n, vgs_n)
    vd_eff = np.abs(vds_n)
    i, gm, gds = _level1(vg_eff, vd_eff, vth, k, lam)
    i_n = np.where(rev, -i, i)
    d_vgs = np.where(rev, -gm, gm)
    d_vds = np.where(rev, gm + gds, gds)
    return pol * i_n, d_vgs, d_vds


def mosfet_eval(p: EffectiveParams, vgs: float, vds: float, kind: DeviceKind) -> tuple[float, float, float]:
    """(id, gm, gds) of one device; id flows into the drain, gm and gds are >= 0."""
    pol = kind.polarity
    i, gm, gds = _mos_terminal(
        np.asarray(vgs, float), np.asarray(vds, float), np.asarray(p.vth), np.asarray(p.kfactor), np.asarray(p.lam), pol
    )
    return float(i), float(gm), float(gds)


# ---------------------------------------------------------------- compiled circuit


class CompiledCircuit:
    """Index arrays and linear stamps for one netlist topology.

    MOSFET parameters are supplied per solve, so one compiled circuit serves
    every key of a locked design.
    """

    def __init__(self, net: Netlist, opts: SimOptions | None = None):
        self.net = net
        self.opts = opts or SimOptions()
        self.index = node_index(net)
        self.n = len(self.index)
        self.vsources = [d for d in net.devices if isinstance(d, VSource)]
        self.isources = [d for d in net.devices if isinstance(d, ISource)]
        self.mosfets = net.mosfets
        self.resistors = [d for d in net.devices if isinstance(d, Resistor)]
        self.capacitors = [d for d in net.devices if isinstance(d, Capacitor)]
        self.size = self.n + len(self.vsources)
        self._check_dc_paths()

        N = self.size
        gnd = N  # extra slot, dropped after assembly

        def ix(node: str) -> int:
            return gnd if node == GROUND else self.index[node]

        self._ix = ix
        A = np.zeros((N + 1, N + 1))
        for r in self.resistors:
            a, b = ix(r.pos), ix(r.neg)
            g = 1.0 / r.ohms
            A[a, a] += g
            A[b, b] += g
            A[a, b] -= g
            A[b, a] -= g
        for j, v in enumerate(self.vsources):
            row = self.n + j
            a, b = ix(v.pos), ix(v.neg)
            A[a, row] += 1.0
            A[b, row] -= 1.0
            A[row, a] += 1.0
            A[row, b] -= 1.0
        self.A = A[:N, :N].copy()

        self.b_dc = np.zeros(N + 1)
        for j, v in enumerate(self.vsources):
            self.b_dc[self.n + j] = v.dc
        for s in self.isources:
            self.b_dc[ix(s.pos)] -= s.dc
            self.b_dc[ix(s.neg)] += s.dc
        self.b_dc = self.b_dc[:N].copy()

        m = self.mosfets
        self.md = np.array([ix(x.drain) for x in m], dtype=int)
        self.mg = np.array([ix(x.gate) for x in m], dtype=int)
        self.ms = np.array([ix(x.source) for x in m], dtype=int)
        self.pol = np.array([x.kind.polarity for x in m])
        self.mos_pos = {x.name: i for i, x in enumerate(m)}
        rows = np.concatenate([self.md, self.md, self.md, self.ms, self.ms, self.ms])
        cols = np.concatenate([self.md, self.mg, self.ms, self.md, self.mg, self.ms])
        self._jflat = rows * (N + 1) + cols
        self._kcl = np.arange(self.n)

        self.ac_settings = (
            self.opts.points_per_decade or net.ac.points_per_decade,
            self.opts.fstart or net.ac.fstart,
            self.opts.fstop or net.ac.fstop,
        )

    def _check_dc_paths(self):
        parent = {n: n for n in self.net.nodes}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for d in self.net.devices:
            if isinstance(d, (Resistor, VSource)):
                parent[find(d.pos)] = find(d.neg)
            elif isinstance(d, Mosfet):
                parent[find(d.drain)] = find(d.source)
        root = find(GROUND)
        floating = [n for n in self.net.nodes if find(n) != root]
        if floating:
            raise SingularSystem(f"no DC path to ground from node(s) {', '.join(floating)}")

    # ------------------------------------------------------------ params

    def param_arrays(self, params: Mapping[str, EffectiveParams]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        vth = np.array([params[m.name].vth for m in self.mosfets])
        k = np.array([params[m.name].kfactor for m in self.mosfets])
        lam = np.array([params[m.name].lam for m in self.mosfets])
        return vth, k, lam

    # ------------------------------------------------------------ DC

    def _mos(self, x, vth, k, lam):
        xe = np.append(x, 0.0)
        vd, vg, vs = xe[self.md], xe[self.mg], xe[self.ms]
        return _mos_terminal(vg - vs, vd - vs, vth, k, lam, self.pol)

    def residual(self, x, vth, k, lam, gmin, scale=1.0):
        N = self.size
        i, _, _ = self._mos(x, vth, k, lam)
        f = self.A @ x - scale * self.b_dc
        f[: self.n] += gmin * x[: self.n]
        inj = np.bincount(self.md, weights=i, minlength=N + 1) - np.bincount(self.ms, weights=i, minlength=N + 1)
        f += inj[:N]
        return f

    def _newton(self, x, vth, k, lam, gmin, max_iters, scale=1.0):
        N = self.size
        opts = self.opts
        diag = np.arange(self.n)
        for it in range(max_iters + 1):
            i, d_vgs, d_vds = self._mos(x, vth, k, lam)
            f = self.A @ x - scale * self.b_dc
            f[: self.n] += gmin * x[: self.n]
            inj = np.bincount(self.md, weights=i, minlength=N + 1) - np.bincount(self.ms, weights=i, minlength=N + 1)
            f += inj[:N]
            res = float(np.max(np.abs(f[: self.n]))) if self.n else 0.0
            vres = float(np.max(np.abs(f[self.n :]))) if N > self.n else 0.0
            if res < opts.dc_tol and vres < opts.dc_tol:
                return x, True, it, res
            if it == max_iters:
                break
            d_vs = -d_vgs - d_vds
            w = np.concatenate([d_vds, d_vgs, d_vs, -d_vds, -d_vgs, -d_vs])
            J = np.bincount(self._jflat, weights=w, minlength=(N + 1) * (N + 1)).reshape(N + 1, N + 1)[:N, :N]
            J = J + self.A
            J[diag, diag] += gmin
            try:
                dx = np.linalg.solve(J, -f)
            except np.linalg.LinAlgError:
                return x, False, it, res
            if not np.all(np.isfinite(dx)):
                return x, False, it, res
            step = float(np.max(np.abs(dx[: self.n]))) if self.n else 0.0
            if step > opts.max_step_v:
                dx *= opts.max_step_v / step
            x = x + dx
        return x, False, max_iters, res

    def solve_dc(self, vth, k, lam, x0: np.ndarray | None = None) -> tuple[np.ndarray, bool, int, float]:
        """Damped Newton, then gmin stepping from ``gmin_start`` on failure."""
        opts = self.opts
        x = np.zeros(self.size) if x0 is None else np.array(x0, dtype=float)
        x1, ok, iters, res = self._newton(x, vth, k, lam, opts.gmin, opts.max_newton_iters)
        total = iters
        if ok:
            return x1, ok, total, res
        decades = max(0, int(round(math.log10(opts.gmin_start / max(opts.gmin, 1e-300)))))
        n_steps = max(1, decades * opts.gmin_steps_per_decade)
        ladder = np.geomspace(opts.gmin_start, max(opts.gmin, 1e-15), n_steps + 1)
        for start in (x, np.zeros(self.size)):
            xs = start.copy()
            for g in ladder[:-1]:
                xs, _, it, _ = self._newton(xs, vth, k, lam, g, opts.max_newton_iters)
                total += it
            xs, ok, it, res = self._newton(xs, vth, k, lam, opts.gmin, opts.max_newton_iters)
            total += it
            if ok:
                return xs, ok, total, res
        return x1, False, total, res

    def dc_solution(self, x, ok, iters, res, vth, k, lam) -> DcSolution:
        xe = np.append(x, 0.0)
        volts = {GROUND: 0.0}
        for name, i in self.index.items():
            volts[name] = float(x[i])
        currents: dict[str, float] = {}
        i_m, d_vgs, _ = self._mos(x, vth, k, lam)
        gm = {}
        for j, m in enumerate(self.mosfets):
            currents[m.name] = float(i_m[j])
            gm[m.name] = float(d_vgs[j])
        for r in self.resistors:
            currents[r.name] = float((xe[self._ix(r.pos)] - xe[self._ix(r.neg)]) / r.ohms)
        for j, v in enumerate(self.vsources):
            currents[v.name] = float(x[self.n + j])
        for s in self.isources:
            currents[s.name] = s.dc
        return DcSolution(volts, currents, ok, iters, res, x, gm)

    # ------------------------------------------------------------ AC

    def frequencies(self) -> np.ndarray:
        ppd, f0, f1 = self.ac_settings
        decades = math.log10(f1 / f0)
        n = int(round(decades * ppd)) + 1
        return np.logspace(math.log10(f0), math.log10(f1), n)

    def ac_matrices(self, x, vth, k, lam) -> tuple[np.ndarray, np.ndarray]:
        """Real conductance matrix G and capacitance matrix C at the DC point."""
        N = self.size
        _, d_vgs, d_vds = self._mos(x, vth, k, lam)
        d_vs = -d_vgs - d_vds
        w = np.concatenate([d_vds, d_vgs, d_vs, -d_vds, -d_vgs, -d_vs])
        G = np.bincount(self._jflat, weights=w, minlength=(N + 1) * (N + 1)).reshape(N + 1, N + 1)[:N, :N]
        G = G + self.A
        diag = np.arange(self.n)
        G[diag, diag] += self.opts.gmin
        C = np.zeros((N + 1, N + 1))

        def cap(a, b, c):
            C[a, a] += c
            C[b, b] += c
            C[a, b] -= c
            C[b, a] -= c

        for c in self.capacitors:
            cap(self._ix(c.pos), self._ix(c.neg), c.farads)
        for j, m in enumerate(self.mosfets):
            wtot = m.width * m.fingers * m.mult
            cap(self.mg[j], self.ms[j], self.opts.cgs_per_width * wtot)
            cap(self.mg[j], self.md[j], self.opts.cgd_per_width * wtot)
        return G, C[:N, :N]

    def ac_rhs(self) -> tuple[np.ndarray, complex]:
        N = self.size
        b = np.zeros(N + 1, dtype=complex)
        for j, v in enumerate(self.vsources):
            b[self.n + j] = v.ac_mag * np.exp(1j * math.radians(v.ac_phase))
        for s in self.isources:
            ph = s.ac_mag * np.exp(1j * math.radians(s.ac_phase))
            b[self._ix(s.pos)] -= ph
            b[self._ix(s.neg)] += ph
        src = self.input_source()
        u = src.ac_mag * np.exp(1j * math.radians(src.ac_phase))
        return b[:N], u

    def input_source(self):
        p = self.net.probe
        if p.source is not None:
            return self.net.device(p.source)
        for d in self.vsources + self.isources:
            if d.ac_mag:
                return d
        raise SimulationError("netlist has no AC source")

    def output_index(self) -> int:
        out = self.net.probe.out
        if out is None:
            raise SimulationError("netlist has no '.probe out=' node")
        if out == GROUND:
            raise SimulationError("output node cannot be ground")
        return self.index[out]

    def solve_ac(self, x, vth, k, lam) -> AcResponse:
        freqs = self.frequencies()
        G, C = self.ac_matrices(x, vth, k, lam)
        b, u = self.ac_rhs()
        if u == 0:
            raise SimulationError("input source has zero AC magnitude")
        Y = G[None, :, :] + (2j * np.pi * freqs)[:, None, None] * C[None, :, :]
        try:
            sol = np.linalg.solve(Y, np.broadcast_to(b, (len(freqs), len(b)))[..., None])[..., 0]
        except np.linalg.LinAlgError:
            for f, y in zip(freqs, Y):
                if np.linalg.matrix_rank(y) < y.shape[0]:
                    raise SingularSystem("singular AC system", float(f)) from None
            raise SingularSystem("singular AC system") from None
        return AcResponse(freqs, sol[:, self.output_index()] / u)


# ---------------------------------------------------------------- public API


def _params_for(net: Netlist, params: Mapping[str, EffectiveParams] | None):
    if params is not None:
        return params
    from .ldemodel import nominal_params

    return {m.name: nominal_params(m, net.model_for(m)) for m in net.mosfets}


def dc_operating_point(
    net: Netlist,
    params: Mapping[str, EffectiveParams] | None = None,
    opts: SimOptions | None = None,
    x0: np.ndarray | None = None,
) -> DcSolution:
    cc = CompiledCircuit(net, opts)
    arrays = cc.param_arrays(_params_for(net, params))
    x, ok, it, res = cc.solve_dc(*arrays, x0=x0)
    return cc.dc_solution(x, ok, it, res, *arrays)


def ac_sweep(
    net: Netlist,
    params: Mapping[str, EffectiveParams] | None,
    dc: DcSolution,
    opts: SimOptions | None = None,
) -> AcResponse:
    if not dc.converged:
        raise NoConvergence(dc.residual, dc.iterations)
    cc = CompiledCircuit(net, opts)
    return cc.solve_ac(dc.x, *cc.param_arrays(_params_for(net, params)))


def _log_interp(f0, f1, y0, y1, target):
    """Frequency where a quantity linear in log f crosses ``target``."""
    if y1 == y0:
        return f0
    t = (target - y0) / (y1 - y0)
    return 10 ** (math.log10(f0) + t * (math.log10(f1) - math.log10(f0)))


def bandwidth_3db(resp: AcResponse) -> tuple[float, bool]:
    """(f_3dB, saturated); saturated responses report the top grid frequency."""
    mag_db = 20 * np.log10(np.abs(resp.transfer))
    target = mag_db[0] - 20 * math.log10(math.sqrt(2))
    below = np.nonzero(mag_db <= target)[0]
    if len(below) == 0:
        return float(resp.frequencies[-1]), True
    i = int(below[0])
    if i == 0:
        return float(resp.frequencies[0]), False
    f = resp.frequencies
    return _log_interp(f[i - 1], f[i], mag_db[i - 1], mag_db[i], target), False


def phase_margin(resp: AcResponse) -> float:
    """180 deg plus the phase lag, relative to the DC sign, at unity gain."""
    h = resp.transfer
    mag = np.abs(h)
    if mag[0] < 1.0:
        raise NoUnityCrossing("gain is below unity at the lowest frequency")
    below = np.nonzero(mag < 1.0)[0]
    if len(below) == 0:
        raise NoUnityCrossing("gain never falls below unity on the grid")
    i = int(below[0])
    sign = 1.0 if h[0].real >= 0 else -1.0
    phase = np.degrees(np.unwrap(np.angle(sign * h)))
    phase -= 360.0 * round(phase[0] / 360.0)
    f = resp.frequencies
    mdb = 20 * np.log10(mag)
    fu = _log_interp(f[i - 1], f[i], mdb[i - 1], mdb[i], 0.0)
    t = (math.log10(fu) - math.log10(f[i - 1])) / (math.log10(f[i]) - math.log10(f[i - 1]))
    ph = phase[i - 1] + t * (phase[i] - phase[i - 1])
    return 180.0 + float(ph)


def dc_power(net: Netlist, dc: DcSolution) -> float:
    total = 0.0
    for d in net.devices:
        if isinstance(d, (VSource, ISource)):
            v = dc.node_voltages[d.pos] - dc.node_voltages[d.neg]
            total += abs(v * dc.device_currents[d.name])
    return total


def extract_metrics(resp: AcResponse, dc: DcSolution, net: Netlist) -> PerfMetrics:
    h0 = resp.transfer[0]
    gain_db = 20 * math.log10(abs(h0)) if h0 != 0 else -math.inf
    bw, saturated = bandwidth_3db(resp)
    try:
        pm = phase_margin(resp)
    except NoUnityCrossing:
        pm = None
    gm_dev = net.probe.gm_device
    gm = dc.gm.get(gm_dev, math.nan) if gm_dev else math.nan
    branches = {b: dc.device_currents[b] for b in net.probe.branches}
    return PerfMetrics(
        gain_db=gain_db,
        gain_sign=1 if h0.real >= 0 else -1,
        phase_margin_deg=pm,
        bw_3db_hz=bw,
        power_w=dc_power(net, dc),
        gm_s=gm,
        branch_currents=branches,
        bw_saturated=saturated,
    )


def simulate(
    net: Netlist,
    params: Mapping[str, EffectiveParams] | None = None,
    opts: SimOptions | None = None,
) -> tuple[PerfMetrics | None, DcSolution]:
    """DC + AC + metrics in one call; metrics are None when DC fails."""
    cc = CompiledCircuit(net, opts)
    arrays = cc.param_arrays(_params_for(net, params))
    dc = cc.dc_solution(*cc.solve_dc(*arrays), *arrays)
    if not dc.converged:
        return None, dc
    resp = cc.solve_ac(dc.x, *arrays)
    return extract_metrics(resp, dc, net), dc


class Evaluator:
    """Metrics of one netlist under many arrangement maps.

    Every solve starts from the DC point of ``reference`` so results depend
    only on the arrangement map, never on evaluation order.  ``table=None``
    gives the LDE-blind view where arrangements have no effect.
    """

    def __init__(self, net: Netlist, table, reference: Mapping | None = None, opts: SimOptions | None = None):
        self.net = net
        self.table = table
        self.cc = CompiledCircuit(net, opts)
        arrays = self.cc.param_arrays(circuit_params(net, table, dict(reference or {})))
        x, ok, _, _ = self.cc.solve_dc(*arrays)
        self.x0 = x if ok else None

    def run(self, arrangements: Mapping) -> tuple[PerfMetrics | None, DcSolution]:
        arrays = self.cc.param_arrays(circuit_params(self.net, self.table, dict(arrangements)))
        dc = self.cc.dc_solution(*self.cc.solve_dc(*arrays, x0=self.x0), *arrays)
        if not dc.converged:
            return None, dc
        try:
            resp = self.cc.solve_ac(dc.x, *arrays)
        except SingularSystem:
            return None, dc
        return extract_metrics(resp, dc, self.net), dc

    def __call__(self, arrangements: Mapping) -> PerfMetrics | None:
        return self.run(arrangements)[0]
