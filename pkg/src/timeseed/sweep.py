"""Parameter grids: evaluation, persistence and boundary checks.

A :class:`GridSpec` names one or two axes that perturb a base network.  Each
cell is integrated from scratch and reduced to one number by a
:class:`Metric`; cells share no state, so :func:`run_grid` may evaluate them
in any order or on several threads and still return bit-identical values.

Grid file layout (UTF-8, ``.`` as decimal separator)::

    #timeseed-grid {"version": 1, "spec": {...}, "integration": {...}, "mask": [[1, 0, ...], ...], ...}
    axis1,axis2,value
    <axis1 value>,<axis2 value or empty>,<value or nan>
    ...

Rows are written in row-major cell order.  Floats use Python's shortest
round-trip representation so a save/load cycle reproduces every bit.
"""

from __future__ import annotations

import enum
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .analysis import SYNC_TOL, late_amplitude, observed_frequency, sync_metrics
from .exceptions import FormatError, InvalidArgumentError, OutOfDomainError, TimeseedError
from .integrator import IntegrationConfig, integrate
from .model import CouplingKind, NetworkParams, uniform_detuning_ladder
from .stationary import gamma_crit

__all__ = [
    "Axis",
    "BoundaryFinding",
    "GRID_FORMAT_VERSION",
    "GridResult",
    "GridSpec",
    "Metric",
    "dumps_grid",
    "load_grid",
    "monotone_boundary_findings",
    "run_grid",
    "save_grid",
]

GRID_FORMAT_VERSION = 1
_MAGIC = "#timeseed-grid "
_CSV_HEADER = "axis1,axis2,value"

_OMEGA_AXIS = re.compile(r"omega_(\d+)$")
_FIXED_AXES = ("strength", "detuning", "delta_omega", "n_ensembles")


class Metric(str, enum.Enum):
    DELTA_OBS = "DeltaObs"
    VARIANCE = "Variance"
    OMEGA_OBS = "OmegaObs"
    AMPLITUDE = "Amplitude"


@dataclass(frozen=True)
class Axis:
    """``count`` evenly spaced values from ``start`` to ``stop`` inclusive.

    Recognized names:

    ``strength``
        coupling strength (``Gamma`` or ``g``).
    ``detuning``
        ``Omega_0 - Omega_beta`` for every ``beta >= 1``, with ``Omega_0`` fixed.
    ``delta_omega``
        width of a uniform detuning ladder topped by the base network's largest drive.
    ``omega_<i>``
        drive of ensemble ``i``.
    ``n_ensembles``
        network size; ensemble 0 is kept as the seed and the last base
        ensemble is repeated to fill the rest.  Values must be integers.
    """

    name: str
    start: float
    stop: float
    count: int

    def __post_init__(self):
        if not (self.name in _FIXED_AXES or _OMEGA_AXIS.match(self.name)):
            raise InvalidArgumentError(f"unknown axis name {self.name!r}")
        start, stop = float(self.start), float(self.stop)
        if not (math.isfinite(start) and math.isfinite(stop) and start < stop):
            raise InvalidArgumentError(f"axis {self.name}: need finite start < stop, got {self.start}, {self.stop}")
        if int(self.count) != self.count or self.count < 2:
            raise InvalidArgumentError(f"axis {self.name}: count must be an integer >= 2, got {self.count!r}")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "stop", stop)
        object.__setattr__(self, "count", int(self.count))
        if self.name == "n_ensembles":
            v = self.values
            if np.any(v != np.round(v)) or v[0] < 1:
                raise InvalidArgumentError("axis n_ensembles must step through positive integers")

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.count)

    def to_dict(self) -> dict:
        return {"name": self.name, "start": self.start, "stop": self.stop, "count": self.count}


@dataclass(frozen=True)
class GridSpec:
    """Axes, base network and the per-cell reduction.

    ``ensemble`` selects the ensemble for the single-ensemble metrics
    (``OmegaObs``, ``Amplitude``).  ``initial`` optionally fixes the starting
    Bloch vectors of every cell (one triple per ensemble); by default every
    ensemble starts polarized along +z.
    """

    axis1: Axis
    base: NetworkParams
    axis2: Axis | None = None
    metric: Metric = Metric.DELTA_OBS
    ensemble: int = 0
    window_fraction: float = 0.25
    initial: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.axis2 is not None and self.axis2.name == self.axis1.name:
            raise InvalidArgumentError(f"both axes vary {self.axis1.name!r}")
        if not 0 < self.window_fraction <= 0.5:
            raise InvalidArgumentError(f"window_fraction must lie in (0, 0.5], got {self.window_fraction!r}")
        if self.initial is not None:
            object.__setattr__(self, "initial", tuple(tuple(float(c) for c in v) for v in self.initial))
        # build the corner cells once so a bad spec fails before any integration
        for i in (0, self.shape[0] - 1):
            for j in (0, self.shape[1] - 1):
                p = self.cell_params(i, j)
                if self.metric in (Metric.DELTA_OBS, Metric.VARIANCE) and p.n < 2:
                    raise InvalidArgumentError(f"metric {self.metric.value} needs at least two ensembles")
                if not 0 <= self.ensemble < p.n:
                    raise InvalidArgumentError(f"ensemble {self.ensemble} out of range for n = {p.n}")
                if self.initial is not None and len(self.initial) != p.n:
                    raise InvalidArgumentError(
                        f"initial state lists {len(self.initial)} ensembles but the cell has {p.n}"
                    )

    @property
    def axes(self) -> tuple[Axis, ...]:
        return (self.axis1,) if self.axis2 is None else (self.axis1, self.axis2)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.axis1.count, 1 if self.axis2 is None else self.axis2.count)

    def cell_values(self, i: int, j: int) -> dict[str, float]:
        out = {self.axis1.name: float(self.axis1.values[i])}
        if self.axis2 is not None:
            out[self.axis2.name] = float(self.axis2.values[j])
        return out

    def cell_params(self, i: int, j: int) -> NetworkParams:
        """Network of cell ``(i, j)``; axes are applied in a fixed order."""
        vals = self.cell_values(i, j)
        p = self.base
        if "n_ensembles" in vals:
            n = int(round(vals["n_ensembles"]))
            ens = p.ensembles[:1] + (p.ensembles[-1],) * (n - 1)
            p = NetworkParams(ens, p.coupling)
        if "delta_omega" in vals:
            ladder = uniform_detuning_ladder(p.n, float(p.omegas.max()), vals["delta_omega"])
            p = p.with_omegas(ladder.omegas)
        if "detuning" in vals:
            if p.n < 2:
                raise InvalidArgumentError("a detuning axis needs at least two ensembles")
            w0 = p.omegas[0]
            p = p.with_omegas([w0] + [w0 - vals["detuning"]] * (p.n - 1))
        for name, v in vals.items():
            m = _OMEGA_AXIS.match(name)
            if m:
                k = int(m.group(1))
                if k >= p.n:
                    raise InvalidArgumentError(f"axis {name} refers to a missing ensemble (n = {p.n})")
                w = p.omegas
                w[k] = v
                p = p.with_omegas(w)
        if "strength" in vals:
            p = p.with_strength(vals["strength"])
        return p

    def to_dict(self) -> dict:
        return {
            "axis1": self.axis1.to_dict(),
            "axis2": None if self.axis2 is None else self.axis2.to_dict(),
            "base": self.base.to_dict(),
            "metric": self.metric.value,
            "ensemble": self.ensemble,
            "window_fraction": self.window_fraction,
            "initial": None if self.initial is None else [list(v) for v in self.initial],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            axis1=Axis(**d["axis1"]),
            axis2=None if d.get("axis2") is None else Axis(**d["axis2"]),
            base=NetworkParams.from_dict(d["base"]),
            metric=Metric(d.get("metric", Metric.DELTA_OBS.value)),
            ensemble=int(d.get("ensemble", 0)),
            window_fraction=float(d.get("window_fraction", 0.25)),
            initial=d.get("initial"),
        )


@dataclass
class GridResult:
    """Metric values on the grid; unfinished or failed cells hold NaN and ``completed == False``."""

    spec: GridSpec
    values: np.ndarray
    completed: np.ndarray
    cfg: IntegrationConfig = field(default_factory=IntegrationConfig)
    errors: dict[tuple[int, int], str] = field(default_factory=dict)

    @classmethod
    def empty(cls, spec: GridSpec, cfg: IntegrationConfig) -> "GridResult":
        return cls(spec, np.full(spec.shape, np.nan), np.zeros(spec.shape, dtype=bool), cfg)

    @property
    def done(self) -> bool:
        return bool(self.completed.all())

    def copy(self) -> "GridResult":
        return replace(self, values=self.values.copy(), completed=self.completed.copy(), errors=dict(self.errors))

    def __eq__(self, other):
        if not isinstance(other, GridResult):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.cfg == other.cfg
            and self.errors == other.errors
            and np.array_equal(self.completed, other.completed)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


def _evaluate(spec: GridSpec, cfg: IntegrationConfig, i: int, j: int) -> float:
    params = spec.cell_params(i, j)
    traj = integrate(params, spec.initial, cfg)
    wf = spec.window_fraction
    if spec.metric is Metric.DELTA_OBS:
        return sync_metrics(traj, wf).delta_obs
    if spec.metric is Metric.VARIANCE:
        return sync_metrics(traj, wf).variance
    if spec.metric is Metric.OMEGA_OBS:
        return observed_frequency(traj, spec.ensemble, wf).omega_obs
    return late_amplitude(traj, spec.ensemble, wf)


def _safe_evaluate(spec, cfg, i, j):
    try:
        return _evaluate(spec, cfg, i, j), None
    except (TimeseedError, ArithmeticError) as exc:
        return math.nan, f"{type(exc).__name__}: {exc}"


def run_grid(
    spec: GridSpec,
    cfg: IntegrationConfig | None = None,
    resume: GridResult | None = None,
    workers: int = 1,
    schedule: Sequence[int] | None = None,
    progress: Callable[[int, int], None] | None = None,
    checkpoint: Callable[[GridResult], None] | None = None,
    checkpoint_every: int = 50,
) -> GridResult:
    """Evaluate every pending cell of ``spec``.

    Parameters
    ----------
    spec : GridSpec
    cfg : IntegrationConfig, optional
        Integration settings shared by every cell.
    resume : GridResult, optional
        Earlier (partial) result for the same spec and config.  Only cells
        not marked completed are evaluated; ``resume`` itself is not modified.
    workers : int
        Thread count.  The compiled integrator releases the GIL.
    schedule : sequence of int, optional
        Evaluation order as a permutation of flat row-major cell indices.
        It never affects the result.
    progress : callable, optional
        Called as ``progress(done, total)`` after each cell.
    checkpoint : callable, optional
        Called with the partial result every ``checkpoint_every`` cells, from
        the calling thread only (e.g. to save it with :func:`save_grid`).

    Returns
    -------
    GridResult
        Cells that raised a library error keep NaN, stay unmarked, and have
        their message stored in ``errors``.
    """
    cfg = cfg or IntegrationConfig()
    if int(workers) != workers or workers < 1:
        raise InvalidArgumentError(f"workers must be a positive integer, got {workers!r}")
    if resume is not None:
        if resume.spec != spec or resume.cfg != cfg:
            raise InvalidArgumentError("cannot resume: grid spec or integration config differs")
        result = resume.copy()
    else:
        result = GridResult.empty(spec, cfg)
    c1, c2 = spec.shape
    total = c1 * c2
    order = list(range(total)) if schedule is None else [int(k) for k in schedule]
    if sorted(order) != list(range(total)):
        raise InvalidArgumentError(f"schedule must be a permutation of range({total})")
    pending = [k for k in order if not result.completed.flat[k]]

    def task(k):
        return k, _safe_evaluate(spec, cfg, *divmod(k, c2))

    if workers == 1:
        outcomes = map(task, pending)
        pool = None
    else:
        pool = ThreadPoolExecutor(max_workers=int(workers))
        outcomes = pool.map(task, pending)
    try:
        for n_done, (k, (value, err)) in enumerate(outcomes, 1):
            cell = divmod(k, c2)
            result.values[cell] = value
            result.completed[cell] = err is None
            if err is None:
                result.errors.pop(cell, None)
            else:
                result.errors[cell] = err
            if progress is not None:
                progress(n_done, len(pending))
            if checkpoint is not None and n_done % checkpoint_every == 0 and n_done < len(pending):
                checkpoint(result)
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
    return result


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def dumps_grid(result: GridResult) -> str:
    """``result`` rendered in the grid file format (see module docstring)."""
    spec = result.spec
    header = {
        "version": GRID_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "integration": result.cfg.to_dict(),
        "mask": result.completed.astype(int).tolist(),
        "errors": [[i, j, msg] for (i, j), msg in sorted(result.errors.items())],
    }
    a1 = spec.axis1.values
    a2 = spec.axis2.values if spec.axis2 is not None else None
    lines = [_MAGIC + json.dumps(header, sort_keys=True), _CSV_HEADER]
    for i in range(spec.shape[0]):
        for j in range(spec.shape[1]):
            second = "" if a2 is None else _fmt(a2[j])
            lines.append(f"{_fmt(a1[i])},{second},{_fmt(result.values[i, j])}")
    return "\n".join(lines) + "\n"


def save_grid(result: GridResult, path) -> None:
    """Write ``result`` to ``path``; see :func:`load_grid` for the reverse."""
    Path(path).write_text(dumps_grid(result), encoding="utf-8")


def load_grid(path) -> GridResult:
    """Read a grid file written by :func:`save_grid`.

    Raises
    ------
    FormatError
        Unknown version, damaged header, or a payload inconsistent with it.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not UTF-8 ({exc})") from None
    lines = text.splitlines()
    if not lines or not lines[0].startswith(_MAGIC):
        raise FormatError(f"{path}: missing '{_MAGIC.strip()}' header line")
    try:
        header = json.loads(lines[0][len(_MAGIC):])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("version") != GRID_FORMAT_VERSION:
        found = header.get("version") if isinstance(header, dict) else None
        raise FormatError(f"{path}: unsupported grid format version {found!r}")
    try:
        spec = GridSpec.from_dict(header["spec"])
        cfg = IntegrationConfig(**header["integration"])
        mask = np.array(header["mask"], dtype=bool)
        errors = {(int(i), int(j)): str(msg) for i, j, msg in header.get("errors", [])}
    except (KeyError, TypeError, ValueError, TimeseedError) as exc:
        raise FormatError(f"{path}: invalid header ({exc})") from None
    if mask.shape != spec.shape:
        raise FormatError(f"{path}: mask shape {mask.shape} does not match grid shape {spec.shape}")
    if len(lines) < 2 or lines[1].strip() != _CSV_HEADER:
        raise FormatError(f"{path}: expected column header {_CSV_HEADER!r}")
    rows = [ln for ln in lines[2:] if ln.strip()]
    c1, c2 = spec.shape
    if len(rows) != c1 * c2:
        raise FormatError(f"{path}: expected {c1 * c2} data rows, found {len(rows)}")
    values = np.empty(spec.shape)
    a1 = spec.axis1.values
    a2 = spec.axis2.values if spec.axis2 is not None else None
    for k, row in enumerate(rows):
        i, j = divmod(k, c2)
        parts = row.split(",")
        try:
            if len(parts) != 3:
                raise ValueError(f"expected 3 fields, got {len(parts)}")
            x1 = float(parts[0])
            x2 = None if parts[1] == "" else float(parts[1])
            values[i, j] = float(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}: data row {k + 1}: {exc}") from None
        if x1 != a1[i] or (a2 is None) != (x2 is None) or (a2 is not None and x2 != a2[j]):
            raise FormatError(f"{path}: data row {k + 1} does not match the axis values in the header")
    if np.any(np.isnan(values[mask])):
        raise FormatError(f"{path}: a cell marked completed holds NaN")
    return GridResult(spec, values, mask, cfg, errors)


@dataclass(frozen=True)
class BoundaryFinding:
    """A coupling above the first synchronized one where synchronization is lost again."""

    fixed_value: float
    first_synced: float
    violation: float


def _default_upper(spec: GridSpec, i: int, j: int) -> float:
    p = spec.cell_params(i, j)
    if p.n == 2 and p.kind is CouplingKind.DISSIPATIVE:
        try:
            return gamma_crit(p)
        except (OutOfDomainError, TimeseedError):
            pass
    return math.inf


def monotone_boundary_findings(
    result: GridResult,
    predicate: Callable[[float], bool] = lambda v: v < SYNC_TOL,
    upper: Callable[[GridSpec, int, int], float] | None = None,
) -> list[BoundaryFinding]:
    """Cells that break monotonicity of the synchronized region along the strength axis.

    For every value of the other axis, finds the smallest sampled strength
    ``G0`` where ``predicate`` holds and reports each larger sampled strength
    below ``upper`` (default: the closed-form critical coupling where it
    applies) where it fails.  These are findings to inspect, not errors.
    Incomplete cells are skipped.
    """
    spec = result.spec
    names = [ax.name for ax in spec.axes]
    if "strength" not in names:
        raise InvalidArgumentError("boundary check needs a strength axis")
    upper = upper or _default_upper
    s_axis = names.index("strength")
    vals = result.values if s_axis == 1 else result.values.T
    done = result.completed if s_axis == 1 else result.completed.T
    strengths = spec.axes[s_axis].values
    other = spec.axes[1 - s_axis].values if len(names) == 2 else np.array([math.nan])
    findings = []
    for r in range(vals.shape[0]):
        first = None
        for c in range(vals.shape[1]):
            if not done[r, c]:
                continue
            cell = (r, c) if s_axis == 1 else (c, r)
            holds = predicate(vals[r, c])
            if first is None:
                if holds:
                    first = strengths[c]
            elif not holds and strengths[c] < upper(spec, *cell):
                findings.append(BoundaryFinding(float(other[r]), float(first), float(strengths[c])))
    return findings
