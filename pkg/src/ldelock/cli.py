"""Command-line front end: lock, sweep, attack, characterize, simulate.

Exit codes: 0 ok, 1 internal error, 2 bad input or config, 3 keyspace too
large for an exhaustive sweep, 4 unknown attack, 5 malformed LDE table.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .attack import (
    ATTACKS,
    Oracle,
    SubcircuitTarget,
    UnknownAttack,
    attack_view,
    brute_force,
    divide_and_conquer,
    naive_guess,
    removal,
)
from .ldemodel import (
    ALL_TRIPLES,
    MalformedTable,
    circuit_params,
    default_table,
    load_table,
    parse_table,
    sample_variations,
)
from .lock import (
    LockError,
    archive_dict,
    arrangements_for,
    build_lock,
    key_file_text,
    keylength,
    keyspace_size,
    locked_from_archive,
    parse_key_file,
    parse_lock_config,
    prune,
    selection_of,
    unlock,
)
from .netlist import Arrangement, NetlistError, flatten_fingers, parse
from .sim import Evaluator, SimulationError, Specs, simulate as sim_simulate
from .sweep import (
    KeyspaceTooLarge,
    SweepConfig,
    SweepConfigError,
    default_jobs,
    parse_selection,
    parse_sweep_config,
    run_sweep,
)

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_SCALE, EXIT_ATTACK, EXIT_TABLE = 0, 1, 2, 3, 4, 5


@contextlib.contextmanager
def _errors():
    """Turn module errors into a one-line message and a stable exit code."""
    try:
        yield
    except click.exceptions.Exit:
        raise
    except click.ClickException:
        raise
    except MalformedTable as e:
        click.echo(f"error: malformed LDE table: {e}", err=True)
        sys.exit(EXIT_TABLE)
    except KeyspaceTooLarge as e:
        click.echo(f"error: {e} (try mode=sample n=...)", err=True)
        sys.exit(EXIT_SCALE)
    except UnknownAttack as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_ATTACK)
    except (NetlistError, LockError, SweepConfigError, SimulationError, ValueError, KeyError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except Exception as e:  # noqa: BLE001
        click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
        sys.exit(EXIT_INTERNAL)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _write(out: Path, name: str, text: str, outputs: dict):
    data = text.encode("utf-8")
    (out / name).write_bytes(data)
    outputs[name] = _sha256(data)


def write_manifest(out: Path, command: str, inputs: list[str], seeds: dict, outputs: dict, params: dict | None = None):
    """RunManifest: ``chain`` hashes everything except the timestamp."""
    body = {
        "tool": "ldelock",
        "version": __version__,
        "command": command,
        "inputs": {str(p): _sha256(Path(p).read_bytes()) for p in inputs},
        "seeds": seeds,
        "params": params or {},
        "outputs": outputs,
    }
    chain = _sha256(json.dumps(body, sort_keys=True).encode())
    body["chain"] = chain
    body["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    (out / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _resolve(ctx: click.Context, name: str, value):
    if value is not None:
        return value
    return (ctx.obj or {}).get(name)


def _outdir(ctx, out) -> Path:
    out = _resolve(ctx, "out", out)
    if out is None:
        raise click.UsageError("--out is required")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


_seed_opt = click.option("--seed", type=int, default=None, help="RNG seed (required where randomness is used).")
_jobs_opt = click.option("--jobs", type=int, default=None, help="Worker processes (default: available cores).")
_out_opt = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")


@click.group()
@click.version_option(__version__, prog_name="ldelock")
@_seed_opt
@_jobs_opt
@_out_opt
@click.pass_context
def cli(ctx, seed, jobs, out):
    """Lock analog netlists with layout-dependent effects and study the result."""
    ctx.obj = {"seed": seed, "jobs": jobs, "out": out}


@cli.command("lock")
@click.argument("netlist", type=click.Path(exists=True, dir_okay=False))
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--table", type=click.Path(exists=True, dir_okay=False), default=None, help="LDE table file.")
@_seed_opt
@_out_opt
@click.pass_context
def cmd_lock(ctx, netlist, config, table, seed, out):
    """Build the lock, prune decoys and write the archive and secret key."""
    with _errors():
        cfg = parse_lock_config(_read(config))
        seed = _resolve(ctx, "seed", seed)
        if seed is None:
            seed = cfg.seed
        if seed is None:
            raise click.UsageError("a seed is required (--seed or seed= in the config)")
        outdir = _outdir(ctx, out)
        tab = load_table(table)
        net = flatten_fingers(parse(_read(netlist)))
        locked = build_lock(net, cfg.groups, seed, tab, cfg.permute_bits)
        specs = Specs.from_mapping({**net.spec_dict(), **cfg.specs})
        report = None
        if cfg.prune:
            ev = Evaluator(net, tab, locked.reference_arrangements())
            locked, report = prune(locked, ev, cfg.policy(specs, seed))
        outputs: dict = {}
        _write(outdir, "archive.json", _json(archive_dict(locked, cfg.guard_band, specs.as_dict())), outputs)
        _write(outdir, "secret.key", key_file_text(locked), outputs)
        if report is not None:
            _write(outdir, "prune_report.json", _json(report.as_dict()), outputs)
        inputs = [netlist, config] + ([table] if table else [])
        write_manifest(outdir, "lock", inputs, {"seed": seed}, outputs)
        click.echo(
            f"locked {len(locked.groups)} groups: keylength {keylength(locked)}, "
            f"keyspace {keyspace_size(locked)}, sizes {'x'.join(map(str, locked.sizes))}"
        )


def _load_archive(path: str):
    d = json.loads(_read(path))
    return d, locked_from_archive(d)


@cli.command("sweep")
@click.argument("archive", type=click.Path(exists=True, dir_okay=False))
@click.argument("config", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--key", "keyfile", type=click.Path(exists=True, dir_okay=False), help="Secret key, to label the correct key.")
@click.option("--mode", type=click.Choice(["exhaustive", "sample"]), default=None)
@click.option("-n", "--samples", type=int, default=None, help="Keys to draw in sample mode.")
@click.option("--cap", type=int, default=None, help="Largest keyspace swept exhaustively.")
@_seed_opt
@_jobs_opt
@_out_opt
@click.pass_context
def cmd_sweep(ctx, archive, config, keyfile, mode, samples, cap, seed, jobs, out):
    """Evaluate keys of an archive and write sweep.csv and summary.json."""
    with _errors():
        d, view = _load_archive(archive)
        base = SweepConfig(
            specs=Specs.from_mapping(d.get("specs") or {}),
            guard_band=tuple(d["guard_band"]) if d.get("guard_band") else None,
        )
        cfg, blind = parse_sweep_config(_read(config), base) if config else (base, False)
        over = {k: v for k, v in (("mode", mode), ("n", samples), ("cap", cap)) if v is not None}
        seed = _resolve(ctx, "seed", seed)
        if seed is not None:
            over["seed"] = seed
        cfg = replace(cfg, **over)
        if cfg.mode == "sample" and cfg.seed is None:
            raise click.UsageError("sample mode needs --seed")
        jobs = _resolve(ctx, "jobs", jobs) or default_jobs()
        outdir = _outdir(ctx, out)
        correct = None
        if keyfile:
            correct = unlock(view, parse_key_file(_read(keyfile))).correct_selection()
        outputs: dict = {}
        with open(outdir / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
            report = run_sweep(view, cfg, correct=correct, out_csv=fh, jobs=jobs, blind=blind)
        outputs["sweep.csv"] = _sha256((outdir / "sweep.csv").read_bytes())
        summary = report.summary()
        _write(outdir, "summary.json", _json(summary), outputs)
        inputs = [archive] + ([config] if config else []) + ([keyfile] if keyfile else [])
        write_manifest(
            outdir, "sweep", inputs, {"seed": cfg.seed}, outputs, {"mode": cfg.mode, "n": cfg.n, "blind": blind}
        )
        c = summary["counts"]
        click.echo(
            f"{summary['evaluated']} keys: "
            + ", ".join(f"{k}={v}" for k, v in c.items())
            + f"; desired fraction {summary['desired_fraction']:.4%}"
        )


def parse_attack_spec(text_or_name: str) -> dict:
    """An attack name, or a file of ``key=value`` lines with ``attack=name``."""
    p = Path(text_or_name)
    if not p.is_file():
        return {"attack": text_or_name}
    spec = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        for tok in raw.split("#", 1)[0].split():
            k, sep, v = tok.partition("=")
            if not sep:
                raise ValueError(f"{p}:{lineno}: expected key=value, got {tok!r}")
            spec[k] = v
    if "attack" not in spec:
        raise ValueError(f"{p}: attack spec has no attack= line")
    return spec


@cli.command("attack")
@click.argument("archive", type=click.Path(exists=True, dir_okay=False))
@click.argument("keyfile", type=click.Path(exists=True, dir_okay=False))
@click.argument("spec")
@_seed_opt
@_out_opt
@click.pass_context
def cmd_attack(ctx, archive, keyfile, spec, seed, out):
    """Run an attack against the archive with an oracle built from KEYFILE.

    SPEC is an attack name (brute_force, divide_and_conquer, removal,
    naive_guess) or a file of key=value settings.
    """
    with _errors():
        s = parse_attack_spec(spec)
        name = s.pop("attack")
        if name not in ATTACKS:
            raise UnknownAttack(f"unknown attack {name!r}; choose from {', '.join(ATTACKS)}")
        seed = _resolve(ctx, "seed", seed)
        if seed is None:
            raise click.UsageError("--seed is required")
        outdir = _outdir(ctx, out)
        d, view = _load_archive(archive)
        unlocked = unlock(view, parse_key_file(_read(keyfile)))
        specs = Specs.from_mapping(d.get("specs") or {})
        blind = s.pop("blind", "off").lower() in ("on", "yes", "true", "1")
        oracle = Oracle(unlocked, specs, blind=blind)
        av = attack_view(view)
        if name == "brute_force":
            budget = int(float(s.pop("budget", av.keyspace)))
            rep = brute_force(av, oracle, budget, s.pop("order", "canonical"), seed)
        elif name == "divide_and_conquer":
            subset = tuple(x for x in s.pop("subset", "P1,P2").split(",") if x)
            tol = float(s.pop("tol", 0.02))
            target = SubcircuitTarget(subset, s.pop("metric", "gm_s"), tol)
            rep = divide_and_conquer(av, oracle, target, seed)
        elif name == "removal":
            rep = removal(av)
            rep.seed = seed
        else:
            names = [x for x in s.pop("guesses", "BL").split(",") if x]
            trials = int(s.pop("trials", 1))
            guesses = [Arrangement(x.upper()) for x in names] * trials
            rep = naive_guess(av, oracle, guesses, seed)
        if s:
            raise ValueError(f"unused attack setting(s): {', '.join(sorted(s))}")
        rep.extra["oracle_queries"] = oracle.queries
        outputs: dict = {}
        _write(outdir, "attack.json", rep.to_json() + "\n", outputs)
        inputs = [archive, keyfile] + ([spec] if Path(spec).is_file() else [])
        write_manifest(outdir, "attack", inputs, {"seed": seed}, outputs, {"attack": name})
        click.echo(rep.to_json())


@cli.command("characterize")
@click.argument("table", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("-n", "--samples", type=int, default=10000, show_default=True, help="Monte Carlo draws per entry (0: none).")
@_seed_opt
@_out_opt
@click.pass_context
def cmd_characterize(ctx, table, samples, seed, out):
    """Print the LDE table and Monte Carlo estimates of its spreads."""
    with _errors():
        tab = parse_table(_read(table)) if table else default_table()
        if samples < 0:
            raise ValueError("--samples must be >= 0")
        seed = _resolve(ctx, "seed", seed)
        if samples and seed is None:
            raise click.UsageError("--seed is required for Monte Carlo")
        rows = []
        lines = [f"{'kind':5} {'flavor':6} {'arr':4} {'dVth%':>8} {'dgm%':>8} {'sdVth%':>8} {'sdgm%':>8}"]
        for t in ALL_TRIPLES:
            e, v = tab.entries[t], tab.variations[t]
            row = {
                "kind": t[0].value,
                "flavor": t[1].value,
                "arrangement": t[2].value,
                "vth_shift": e.vth_shift,
                "gm_shift": e.gm_shift,
                "vth_sd": v.vth_sd,
                "gm_sd": v.gm_sd,
            }
            lines.append(
                f"{t[0].value:5} {t[1].value:6} {t[2].value:4} {e.vth_shift * 100:8.2f} {e.gm_shift * 100:8.2f} "
                f"{v.vth_sd * 100:8.2f} {v.gm_sd * 100:8.2f}"
            )
            rows.append(row)
        if samples:
            lines.append("")
            lines.append(f"Monte Carlo, {samples} draws per entry (seed {seed})")
            lines.append(f"{'kind':5} {'flavor':6} {'arr':4} {'sdVth%':>8} {'est%':>8} {'sdgm%':>8} {'est%':>8}")
            for i, (t, row) in enumerate(zip(ALL_TRIPLES, rows)):
                vth, gm = sample_variations(tab, *t, samples, seed + i)
                row["mc"] = {
                    "vth_mean": float(np.mean(vth)),
                    "vth_sd": float(np.std(vth, ddof=1)),
                    "gm_mean": float(np.mean(gm)),
                    "gm_sd": float(np.std(gm, ddof=1)),
                }
                lines.append(
                    f"{t[0].value:5} {t[1].value:6} {t[2].value:4} {row['vth_sd'] * 100:8.2f} "
                    f"{row['mc']['vth_sd'] * 100:8.2f} {row['gm_sd'] * 100:8.2f} {row['mc']['gm_sd'] * 100:8.2f}"
                )
        click.echo("\n".join(lines))
        out = _resolve(ctx, "out", out)
        if out:
            outdir = _outdir(ctx, out)
            outputs: dict = {}
            _write(outdir, "characterize.json", _json({"samples": samples, "seed": seed, "entries": rows}), outputs)
            write_manifest(outdir, "characterize", [table] if table else [], {"seed": seed}, outputs, {"samples": samples})


def _metrics_dict(m) -> dict:
    if m is None:
        return {"converged": False}
    return {
        "converged": True,
        "gain_db": m.gain_db,
        "gain_sign": m.gain_sign,
        "phase_margin_deg": m.phase_margin_deg,
        "bw_3db_hz": m.bw_3db_hz,
        "bw_saturated": m.bw_saturated,
        "power_w": m.power_w,
        "gm_s": m.gm_s,
        "branch_currents": m.branch_currents,
    }


@cli.command("simulate")
@click.argument("design", type=click.Path(exists=True, dir_okay=False))
@click.option("--key", "keyfile", type=click.Path(exists=True, dir_okay=False), help="Key file for an archive.")
@click.option("--select", "selection", default=None, help="Dash-joined couple indices, e.g. 2-0-4-1-3-0-1.")
@click.option("--table", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--blind", is_flag=True, help="Ignore layout-dependent effects.")
def cmd_simulate(design, keyfile, selection, table, blind):
    """Print the metrics of a netlist, or of one key of an archive."""
    with _errors():
        text = _read(design)
        if text.lstrip().startswith("{"):
            d = json.loads(text)
            view = locked_from_archive(d)
            if keyfile:
                sel = selection_of(view, parse_key_file(_read(keyfile)))
            elif selection:
                sel = parse_selection(selection)
                if len(sel) != len(view.groups) or any(not 0 <= s < g.size for s, g in zip(sel, view.groups)):
                    raise ValueError(f"selection {selection!r} does not fit group sizes {view.sizes}")
            else:
                raise click.UsageError("an archive needs --key or --select")
            ev = Evaluator(view.base, None if blind else view.lde, view.reference_arrangements())
            m = ev(arrangements_for(view, sel))
        else:
            net = parse(text)
            tab = None if blind else load_table(table)
            m, _ = sim_simulate(net, circuit_params(net, tab))
        click.echo(json.dumps(_metrics_dict(m), indent=2, sort_keys=True))


def main(argv=None):
    cli.main(args=argv, prog_name="ldelock")


if __name__ == "__main__":
    main()
