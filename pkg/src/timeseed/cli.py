"""Command-line entry point: ``timeseed {simulate,spectrum,sweep,crit}``.

A run configuration is assembled from a preset, then a JSON file
(``--config``), then command-line flags; later sources override earlier ones
key by key.  The merged document is validated in full before anything is
computed.

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 resource cap exceeded.
"""

from __future__ import annotations

import argparse
import copy
import io
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .exceptions import (
    ConfigError,
    FormatError,
    IntegrationBudgetError,
    InvalidArgumentError,
    InvalidBracketError,
    NumericalFailureError,
    OutOfDomainError,
    ResourceError,
    SolverError,
    StructuralError,
    TimeseedError,
    UnsupportedConfigurationError,
)
from .integrator import IntegrationConfig, integrate
from .model import BlochState, CouplingKind, NetworkParams, uniform_detuning_ladder
from .spectral import DickeSpace, build_liouvillian, dense_cap, dominant_ladder, scaling_fit, slow_spectrum, STEADY_SHIFT
from .stationary import critical_coupling_search, gamma_crit
from .sweep import Axis, GridSpec, dumps_grid, load_grid, run_grid, save_grid

__all__ = ["PRESETS", "RunConfig", "main", "parse_config"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_RESOURCE = 0, 2, 3, 4
_SIG = 12

DESK_SIZES = [6, 10, 14, 18, 22]
FULL_SIZES = [6, 10, 14, 18, 22, 26, 30, 34, 38]

PRESETS: dict[str, dict] = {
    "fig1": {
        "network": {"omegas": [1.5, 0.9], "coupling": {"kind": "dissipative", "strength": 0.1}},
        "integration": {"t_end": 200.0},
        "spectrum": {"sizes": DESK_SIZES, "strengths": [0.1, "crit"]},
        "crit": {"lo": 0.5, "hi": 1.0},
    },
    "fig1f": {
        "network": {"omegas": [1.5, 0.9], "coupling": {"kind": "dissipative", "strength": 0.1}},
        "spectrum": {"sizes": DESK_SIZES, "strengths": [0.1, "crit"], "mu_re": 5, "mu_im": 4},
    },
    "fig2": {
        "network": {"omegas": [1.2, 0.9, 0.9, 0.9], "coupling": {"kind": "dissipative", "strength": 0.1}},
        "integration": {"t_end": 400.0},
        "sweep": {
            "axis1": {"name": "strength", "start": 0.01, "stop": 1.0, "count": 40},
            "axis2": {"name": "n_ensembles", "start": 2, "stop": 5, "count": 4},
            "metric": "OmegaObs",
            "ensemble": 0,
        },
        "crit": {"lo": 0.01, "hi": 1.5},
    },
    "fig3a": {
        "network": {"omegas": [1.15, 1.0], "coupling": {"kind": "dissipative", "strength": 0.05}},
        "integration": {"t_end": 1000.0},
        "sweep": {
            "axis1": {"name": "detuning", "start": 0.005, "stop": 0.3, "count": 40},
            "axis2": {"name": "strength", "start": 0.005, "stop": 0.2, "count": 40},
            "metric": "DeltaObs",
        },
    },
    "fig3e": {
        "network": {
            "ladder": {"n": 5, "omega_max": 1.5, "delta_omega": 0.05},
            "coupling": {"kind": "dissipative", "strength": 0.5},
        },
        "integration": {"t_end": 1000.0},
        "sweep": {
            "axis1": {"name": "delta_omega", "start": 0.01, "stop": 0.4, "count": 40},
            "metric": "Variance",
        },
    },
    "appD": {
        "network": {"omegas": [1.2, 0.9], "coupling": {"kind": "coherent", "strength": 0.5}},
        "integration": {"t_end": 400.0},
        "crit": {"lo": 1.0, "hi": 1.2, "tol": 1e-4},
    },
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_AXIS = {
    "type": "object",
    "required": ["name", "start", "stop", "count"],
    "additionalProperties": False,
    "properties": {"name": {"type": "string"}, "start": _NUM, "stop": _NUM, "count": {"type": "integer", "minimum": 2}},
}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["network"],
    "properties": {
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "omegas": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "ladder": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n", "omega_max", "delta_omega"],
                    "properties": {
                        "n": {"type": "integer", "minimum": 2},
                        "omega_max": {"type": "number", "minimum": 0},
                        "delta_omega": {"type": "number", "minimum": 0},
                    },
                },
                "kappa": _POS,
                "coupling": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": [k.value for k in CouplingKind]},
                        "strength": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "integration": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_end": _POS,
                "dt_out": _POS,
                "rel_tol": _POS,
                "abs_tol": _POS,
                "max_steps": {"type": "integer", "minimum": 1},
            },
        },
        "initial": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "minItems": 3, "maxItems": 3, "items": _NUM},
        },
        "spectrum": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sizes": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 2}},
                "strengths": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"anyOf": [{"type": "number", "minimum": 0}, {"const": "crit"}]},
                },
                "k": {"type": "integer", "minimum": 3},
                "mu_re": {"type": "integer", "minimum": 0},
                "mu_im": {"type": "integer", "minimum": 0},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axis1"],
            "properties": {
                "axis1": _AXIS,
                "axis2": {"anyOf": [_AXIS, {"type": "null"}]},
                "metric": {"enum": ["DeltaObs", "Variance", "OmegaObs", "Amplitude"]},
                "ensemble": {"type": "integer", "minimum": 0},
                "window_fraction": _POS,
            },
        },
        "crit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lo": {"type": "number", "minimum": 0}, "hi": _POS, "tol": _POS},
        },
        "threads": {"type": "integer", "minimum": 1},
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration shared by all commands."""

    params: NetworkParams
    integration: IntegrationConfig
    initial: BlochState | None
    raw: dict

    def section(self, name: str) -> dict:
        if name not in self.raw:
            raise ConfigError("section required by this command is missing", name)
        return self.raw[name]


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _wrap(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (InvalidArgumentError, StructuralError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), path) from None


def parse_config(doc: dict) -> RunConfig:
    """Validate a merged configuration document.

    Raises
    ------
    ConfigError
        With ``path`` naming the first offending field.
    """
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _path(err.absolute_path))

    net = doc["network"]
    kappa = net.get("kappa", 1.0)
    coupling = net.get("coupling", {})
    kind = coupling.get("kind", "dissipative")
    strength = coupling.get("strength", 0.0)
    if ("omegas" in net) == ("ladder" in net):
        raise ConfigError("give exactly one of 'omegas' or 'ladder'", "network")
    if "omegas" in net:
        params = _wrap("network", NetworkParams.from_omegas, net["omegas"], kappa, kind, strength)
    else:
        lad = net["ladder"]
        base = _wrap("network.ladder", uniform_detuning_ladder, lad["n"], lad["omega_max"], lad["delta_omega"], kappa)
        params = base.with_coupling(kind, strength)

    integration = _wrap("integration", IntegrationConfig, **doc.get("integration", {}))

    initial = None
    if "initial" in doc:
        initial = _wrap("initial", BlochState, doc["initial"])
        if initial.n != params.n:
            raise ConfigError(f"{initial.n} Bloch vectors given for {params.n} ensembles", "initial")

    if "spectrum" in doc:
        spec = doc["spectrum"]
        sizes = spec.get("sizes", DESK_SIZES)
        for i, s in enumerate(sizes):
            if s % 2:
                raise ConfigError(f"total atom number must be even, got {s}", f"spectrum.sizes[{i}]")
        if sorted(set(sizes)) != sizes:
            raise ConfigError("sizes must be strictly increasing", "spectrum.sizes")
        if "crit" in spec.get("strengths", []) and params.n == 2 and params.kind is CouplingKind.DISSIPATIVE:
            _wrap("spectrum.strengths", gamma_crit, params)
    if "sweep" in doc:
        _build_grid_spec(doc["sweep"], params, initial)
    if "crit" in doc:
        crit = doc["crit"]
        if "lo" in crit and "hi" in crit and not crit["lo"] < crit["hi"]:
            raise ConfigError("need lo < hi", "crit")
    return RunConfig(params, integration, initial, doc)


def _build_grid_spec(sweep: dict, params: NetworkParams, initial: BlochState | None) -> GridSpec:
    axis1 = _wrap("sweep.axis1", lambda: Axis(**sweep["axis1"]))
    axis2 = None
    if sweep.get("axis2") is not None:
        axis2 = _wrap("sweep.axis2", lambda: Axis(**sweep["axis2"]))
    init = None if initial is None else tuple(map(tuple, initial.components.tolist()))
    return _wrap(
        "sweep",
        GridSpec,
        axis1=axis1,
        base=params,
        axis2=axis2,
        metric=sweep.get("metric", "DeltaObs"),
        ensemble=sweep.get("ensemble", 0),
        window_fraction=sweep.get("window_fraction", 0.25),
        initial=init,
    )


def _g(x: float) -> str:
    return f"{x:.{_SIG}g}"


def _num(x: float):
    # 12 significant digits, stable across runs
    return None if not math.isfinite(x) else float(_g(x))


def _load_json(path: str) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"not UTF-8 at byte offset {exc.start}", path) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ConfigError(
            f"malformed JSON at byte offset {offset} (line {exc.lineno}, column {exc.colno}): {exc.msg}", path
        ) from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", path)
    return doc


def _parse_triples(text: str) -> list[list[float]]:
    rows = []
    for k, chunk in enumerate(text.split(";")):
        parts = chunk.split(",")
        try:
            vec = [float(p) for p in parts]
        except ValueError:
            vec = []
        if len(vec) != 3:
            raise ConfigError(f"expected 'x,y,z' triples separated by ';', got {chunk!r}", f"--seed-override[{k}]")
        rows.append(vec)
    return rows


def _parse_sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}", "--sizes") from None


def _assemble(args) -> RunConfig:
    doc: dict = {}
    if args.preset:
        doc = copy.deepcopy(PRESETS[args.preset])
    if args.config:
        doc = _merge(doc, _load_json(args.config))
    flags: dict = {}
    if args.seed_override:
        flags["initial"] = _parse_triples(args.seed_override)
    if getattr(args, "strength", None) is not None:
        flags["network"] = {"coupling": {"strength": args.strength}}
    if getattr(args, "t_end", None) is not None:
        flags["integration"] = {"t_end": args.t_end}
    if getattr(args, "sizes", None):
        flags["spectrum"] = {"sizes": _parse_sizes(args.sizes)}
    elif getattr(args, "full_ladder", False):
        flags["spectrum"] = {"sizes": FULL_SIZES}
    if args.threads is not None:
        flags["threads"] = args.threads
    doc = _merge(doc, flags)
    if "network" not in doc:
        raise ConfigError("no network given; use --preset or --config", "network")
    return parse_config(doc)


class _Output:
    """Collects all output and writes it once, to ``--out`` or stdout."""

    def __init__(self, path):
        self.path = path
        self.buf = io.StringIO()

    def write(self, text: str):
        self.buf.write(text)

    def close(self):
        data = self.buf.getvalue()
        if self.path:
            Path(self.path).write_text(data, encoding="utf-8")
        else:
            try:
                sys.stdout.write(data)
                sys.stdout.flush()
            except BrokenPipeError:
                # reader went away (e.g. piped into head); drop the rest quietly
                devnull = open(os.devnull, "w")
                os.dup2(devnull.fileno(), sys.stdout.fileno())


def cmd_simulate(cfg: RunConfig, args, out: _Output) -> None:
    traj = integrate(cfg.params, cfg.initial, cfg.integration)
    n = traj.n
    cols = ["t"] + [f"m{ax}_{a}" for a in range(n) for ax in "xyz"]
    out.write(",".join(cols) + "\n")
    flat = traj.states.reshape(len(traj.times), -1)
    for t, row in zip(traj.times, flat):
        out.write(_g(t) + "," + ",".join(_g(v) for v in row) + "\n")


def _resolve_strengths(cfg: RunConfig, strengths) -> list[float]:
    out = []
    for s in strengths:
        if s == "crit":
            try:
                out.append(gamma_crit(cfg.params))
            except (UnsupportedConfigurationError, OutOfDomainError) as exc:
                raise ConfigError(f"'crit' is not available here: {exc}", "spectrum.strengths") from None
        else:
            out.append(float(s))
    return out


def cmd_spectrum(cfg: RunConfig, args, out: _Output) -> None:
    spec = cfg.raw.get("spectrum", {})
    sizes = spec.get("sizes", DESK_SIZES)
    k = spec.get("k", 12)
    mu_re, mu_im = spec.get("mu_re", 4), spec.get("mu_im", 4)
    if cfg.params.n != 2:
        raise ConfigError("the Liouvillian is built for two ensembles only", "network")
    if args.fit and len(sizes) < 2:
        raise InvalidArgumentError(f"a size-scaling fit needs at least two sizes, got {len(sizes)}")
    strengths = _resolve_strengths(cfg, spec.get("strengths", [cfg.params.strength]))

    out.write("strength,N,re_lambda1,im_lambda1,re_lambda2,im_lambda2\n")
    fits = []
    for s in strengths:
        params = cfg.params.with_strength(s)
        ladder = dominant_ladder(params, sizes, k=k)
        for n_total, res in zip(sizes, ladder):
            l1, l2 = res.dominant, res.second_dominant
            out.write(",".join([_g(s), str(n_total), _g(l1.real), _g(l1.imag), _g(l2.real), _g(l2.imag)]) + "\n")
        if args.fit:
            re1 = [r.dominant.real for r in ladder]
            im1 = [r.dominant.imag for r in ladder]
            entry = {"strength": _num(s), "sizes": sizes}
            for name, vals, mu in (("re", re1, mu_re), ("im", im1, mu_im)):
                # with fewer sizes than mu + 1 the polynomial interpolates the points
                mu_eff = min(mu, len(sizes) - 1)
                fit = scaling_fit(sizes, vals, mu_eff)
                entry[name] = {
                    "mu": fit.mu,
                    "a0": _num(fit.extrapolated),
                    "a0_stderr": _num(fit.extrapolated_stderr),
                    "coefficients": [_num(c) for c in fit.coefficients],
                    "residual": _num(fit.residual),
                }
            fits.append(entry)
    for entry in fits:
        out.write("# fit " + json.dumps(entry, sort_keys=True) + "\n")
    if args.cross_check:
        out.write(_cross_check(cfg.params.with_strength(strengths[0]), sizes, k) + "\n")


def _cross_check(params: NetworkParams, sizes, k: int) -> str:
    cap = dense_cap()
    eligible = [n for n in sizes if DickeSpace.symmetric(n).liouvillian_dim <= cap]
    if not eligible:
        return "# cross-check skipped: no size within the dense cap"
    n_total = eligible[-1]
    L = build_liouvillian(params, DickeSpace.symmetric(n_total))
    dense = slow_spectrum(L, k=k, dense_cap_=cap)
    # a shift sitting exactly on an eigenvalue makes the factorization singular
    iterative = slow_spectrum(L, k=k, shifts=(STEADY_SHIFT, dense.dominant + STEADY_SHIFT), dense_cap_=0)
    d1 = abs(dense.dominant - iterative.dominant)
    top = iterative.eigenvalues[:k]
    d_all = max(np.min(np.abs(dense.eigenvalues - z)) for z in top)
    return f"# cross-check N={n_total} dim={L.shape[0]} max|dlambda1|={d1:.3e} max|dlambda|={d_all:.3e}"


def cmd_sweep(cfg: RunConfig, args, out: _Output) -> None:
    spec = _build_grid_spec(cfg.section("sweep"), cfg.params, cfg.initial)
    threads = cfg.raw.get("threads", 1)
    resume = None
    if args.resume:
        if not args.out:
            raise ConfigError("--resume needs --out pointing at an existing grid file", "--resume")
        if Path(args.out).exists():
            resume = load_grid(args.out)
    checkpoint = None
    if args.out:
        checkpoint = lambda partial: save_grid(partial, args.out)  # noqa: E731
    result = run_grid(spec, cfg.integration, resume=resume, workers=threads, checkpoint=checkpoint)
    if args.out:
        save_grid(result, args.out)
    else:
        out.write(dumps_grid(result))
    if result.errors:
        print(f"timeseed: {len(result.errors)} grid cell(s) failed; see the file header", file=sys.stderr)


def cmd_crit(cfg: RunConfig, args, out: _Output) -> None:
    params = cfg.params
    crit = cfg.raw.get("crit", {})
    analytic = None
    try:
        analytic = gamma_crit(params)
    except (UnsupportedConfigurationError, OutOfDomainError):
        pass
    lo = crit.get("lo", 0.0)
    hi = crit.get("hi")
    if hi is None:
        hi = 1.5 * analytic if analytic else 2.0 * float(params.omegas.max()) + 1.0
    tol = crit.get("tol", 1e-4)
    found = critical_coupling_search(params, lo, hi, tol=tol, initial=cfg.initial)
    report = {
        "coupling": params.kind.value,
        "n": params.n,
        "analytic": "n/a" if analytic is None else _num(analytic),
        "bisection": _num(found),
        "bracket": [_num(lo), _num(hi)],
        "tol": _num(tol),
        "delta": "n/a" if analytic is None else _num(abs(found - analytic)),
    }
    out.write(json.dumps(report, indent=2, sort_keys=True) + "\n")


COMMANDS = {"simulate": cmd_simulate, "spectrum": cmd_spectrum, "sweep": cmd_sweep, "crit": cmd_crit}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    common.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
    common.add_argument("--threads", type=int, metavar="K", help="worker threads for grid sweeps")
    common.add_argument("--seed-override", metavar="TRIPLES",
                        help="initial Bloch vectors, e.g. '0,0,1;0,0,1'")
    common.add_argument("--strength", type=float, help="coupling strength (overrides the config)")
    common.add_argument("--t-end", type=float, help="integration time (overrides the config)")

    parser = argparse.ArgumentParser(prog="timeseed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="mean-field trajectory as CSV")
    sp_ = sub.add_parser("spectrum", parents=[common], help="dominant Liouvillian eigenvalues vs N")
    sp_.add_argument("--sizes", metavar="N,N,...", help="even total atom numbers, e.g. 6,10,14")
    sp_.add_argument("--full-ladder", action="store_true", help=f"use N = {','.join(map(str, FULL_SIZES))}")
    sp_.add_argument("--fit", action="store_true", help="append 1/N polynomial extrapolations")
    sp_.add_argument("--cross-check", action="store_true", help="compare dense and iterative eigenvalues")
    sw = sub.add_parser("sweep", parents=[common], help="evaluate a parameter grid")
    sw.add_argument("--resume", action="store_true", help="continue the grid file given by --out")
    sub.add_parser("crit", parents=[common], help="critical coupling, closed form and bisection")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = _assemble(args)
        out = _Output(args.out if args.command != "sweep" else None)
        COMMANDS[args.command](cfg, args, out)
        out.close()
    except (ConfigError, InvalidArgumentError, StructuralError, UnsupportedConfigurationError,
            OutOfDomainError, InvalidBracketError, FormatError) as exc:
        print(f"timeseed: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailureError, IntegrationBudgetError, SolverError) as exc:
        print(f"timeseed: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ResourceError, MemoryError) as exc:
        print(f"timeseed: resource cap exceeded: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except TimeseedError as exc:
        print(f"timeseed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
