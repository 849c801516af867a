"""Experiment orchestration: configuration files, the formula-versus-numerics
sweep with its refinement gate, transition histories and the verification
report that aggregates every invariant suite.
"""

from __future__ import annotations

import concurrent.futures as cf
import hashlib
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .dynamics import (
    GAUSSIAN,
    SEXTIC,
    PRECISIONS,
    ConfigurationError,
    PacketSpec,
    ProjectionOperator,
    StrangPropagator,
    TwoLevelState,
    band_amplitudes,
    default_t0,
    prepare_incoming,
    superadiabatic_components,
)
from .model import DiabaticModel
from .spectral import Grid1D
from .superadiabatic import coefficient_tables, projection_symbol
from .transition import (
    HistoryCurve,
    TransitionParams,
    formula_transmitted,
    history_error_function_model,
    optimal_representation,
    relative_l2_error,
)

log = logging.getLogger(__name__)

SWEEP = "sweep"
SPECTRUM = "spectrum"
HISTORIES = "histories"
VERIFY = "verify"
EXPERIMENTS = (SWEEP, SPECTRUM, HISTORIES, VERIFY)

STATIONARY_WINDOW = 200
STATIONARY_TOL = 1e-4
# Bound on |theta'| at the start, relative to the predicted transmitted norm.
TRANSIENT_FRACTION = 1e-4
# Below this predicted transmitted norm, "auto" precision propagates in long double.
EXTENDED_PRECISION_NORM = 1e-7
HISTORY_EVERY = 25


class GateError(RuntimeError):
    """The solver did not pass the self-convergence gate; carries diagnostics."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class RunConfig:
    """All inputs of one run.  ``None`` grid or time entries are chosen automatically."""

    c: float
    alpha: float
    delta: float
    p0: float
    epsilon: float
    shape: str = GAUSSIAN
    sigma2: float = 2.0
    n_points: Optional[int] = None
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    t0: Optional[float] = None
    dt: Optional[float] = None
    t_final: Optional[float] = None
    experiment: str = SWEEP
    n_range: tuple = (0, 1, 2, 3, 4, 5)
    max_halvings: int = 4
    indicator: bool = True
    precision: str = "auto"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}")
        if self.precision not in ("auto",) + PRECISIONS:
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        if (self.x_min is None) != (self.x_max is None):
            raise ConfigurationError("grid.x_min and grid.x_max must be given together")
        self.n_range = tuple(self.n_range)

    @property
    def model(self):
        return DiabaticModel.sech(self.c, self.alpha, self.delta)

    @property
    def packet(self):
        return PacketSpec(self.shape, self.p0, self.epsilon, self.sigma2)

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return RunConfig(**data)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_mapping(cls, data):
        """Build from a nested mapping with model/grid/packet/run blocks."""
        for block in ("model", "packet", "run"):
            if block not in data:
                raise ConfigurationError(f"configuration lacks the [{block}] block")
        m, pk, run = data["model"], data["packet"], data["run"]
        grid = data.get("grid", {})
        if m.get("kind", "sech") != "sech":
            raise ConfigurationError("only model.kind = 'sech' can be configured from a file")
        t0 = run.get("t0", "auto")
        kwargs = dict(
            c=float(m["c"]),
            alpha=float(m["alpha"]),
            delta=float(m["delta"]),
            p0=float(pk["p0"]),
            shape=pk.get("shape", GAUSSIAN),
            sigma2=float(pk.get("sigma2", 2.0)),
            epsilon=float(run["epsilon"]),
            n_points=grid.get("n"),
            x_min=grid.get("x_min"),
            x_max=grid.get("x_max"),
            t0=None if t0 == "auto" else float(t0),
            dt=run.get("dt"),
            t_final=run.get("t_final"),
            experiment=data.get("experiment", run.get("experiment", SWEEP)),
            indicator=bool(run.get("indicator", True)),
            precision=run.get("precision", "auto"),
        )
        if "n_range" in run:
            kwargs["n_range"] = tuple(run["n_range"])
        if "max_halvings" in run:
            kwargs["max_halvings"] = int(run["max_halvings"])
        extra = {k: v for k, v in data.items() if k not in ("model", "packet", "run", "grid", "experiment")}
        return cls(extra=extra, **kwargs)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_mapping(tomllib.load(fh))


def sweep_configs(config):
    """Expand a [sweep] block (lists of epsilon and p0) into point configs."""
    block = config.extra.get("sweep", {})
    eps_list = block.get("epsilon", [config.epsilon])
    p0_list = block.get("p0", [config.p0])
    return [config.replace(epsilon=float(e), p0=float(p)) for p in p0_list for e in eps_list]


@dataclass
class ComparisonRecord:
    epsilon: float
    p0: float
    norm_formula: float
    norm_numeric: float
    rel_l2_error: float
    solver_self_error: float
    wall_time_s: float
    meta: dict = field(default_factory=dict, repr=False)

    # Wall time stays out of the CSV row so outputs are reproducible; it goes to the manifest.
    HEADER = ("epsilon", "p0", "norm_formula", "norm_numeric", "rel_l2_error", "solver_self_error")

    def row(self):
        return [self.epsilon, self.p0, self.norm_formula, self.norm_numeric,
                self.rel_l2_error, self.solver_self_error]


def _next_pow2(n):
    return 1 << max(int(math.ceil(math.log2(max(n, 2)))), 1)


def auto_grid(spec, model, t0, t1, n_points=None):
    """Symmetric periodic grid holding the packet from t0 to t1.

    The half-length is the farthest travel of the fastest occupied momentum
    plus twelve spread widths; n_points is the smallest power of two whose
    momentum cutoff exceeds 1.5 times the largest occupied momentum.  A
    Gaussian packet has relative amplitude 1.5e-8 six widths from its centre,
    which is taken as the edge of the occupied range.
    """
    eps = spec.epsilon
    sk = spec.momentum_width()
    k_hi = math.sqrt((spec.p0 + 6 * sk) ** 2 + 4 * model.delta)
    t_far = max(abs(t0), abs(t1))
    spread = math.hypot(spec.position_width(), sk * t_far)
    half = k_hi * t_far + 12 * spread
    if n_points is None:
        n_points = _next_pow2(1.5 * k_hi * 2 * half / (math.pi * eps))
    return Grid1D(-half, half, int(n_points), eps)


def _grid_for(config, spec, model, t0, t1, scale=1):
    if config.x_min is not None:
        n = (config.n_points or 2**14) * scale
        return Grid1D(float(config.x_min), float(config.x_max), int(n), config.epsilon)
    g = auto_grid(spec, model, t0, t1, config.n_points)
    return Grid1D(g.x_min, g.x_max, g.n_points * scale, g.epsilon)


def _lower_norm(state, model):
    _, minus = band_amplitudes(state, model)
    return state.grid.norm(minus)


def _evolve_to_stationary(prop, state, model, t_end, fixed_end):
    """Propagate to t_end, then (unless fixed) in windows until the lower norm settles."""
    steps = int(round((t_end - state.time) / prop.dt))
    state = prop.evolve(state, steps)
    if fixed_end:
        return state, steps
    prev = _lower_norm(state, model)
    for _ in range(200):
        state = prop.evolve(state, STATIONARY_WINDOW)
        steps += STATIONARY_WINDOW
        cur = _lower_norm(state, model)
        if abs(cur - prev) <= STATIONARY_TOL * max(cur, 1e-300):
            return state, steps
        prev = cur
    raise GateError("lower-band norm never became stationary", {"last_norm": cur})


def _numeric_spectrum(grid, spec, model, t0, t_end, dt, fixed_end, precision="double"):
    state = prepare_incoming(spec, model, grid, t0)
    n0 = state.norm()
    prop = StrangPropagator(model, grid, dt, precision)
    state, steps = _evolve_to_stationary(prop, state, model, t_end, fixed_end)
    drift = abs(state.norm() - n0)
    _, minus = band_amplitudes(state, model)
    return grid.forward(minus), state.time, steps, drift


def _common_modes(coarse, fine):
    """Fine-grid spectrum restricted to the coarse grid's wavenumbers (same domain)."""
    idx = np.round(coarse.k / fine.dk).astype(int) % fine.n_points
    return idx


def _predicted_norm(config):
    model, spec = config.model, config.packet
    t0 = default_t0(spec, model)
    grid = _grid_for(config, spec, model, t0, -t0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return formula_transmitted(spec.psi_hat, TransitionParams.from_model(model, config.epsilon, 0.0),
                                   grid=grid, indicator=config.indicator).l2_norm


def _transient_safe_t0(config, norm=None):
    """Default start time, moved out until the start-up transient is below
    TRANSIENT_FRACTION of the predicted transmitted norm."""
    norm = _predicted_norm(config) if norm is None else norm
    return default_t0(config.packet, config.model, theta_floor=TRANSIENT_FRACTION * norm)


def _precision_for(config, norm=None):
    if config.precision != "auto":
        return config.precision
    norm = _predicted_norm(config) if norm is None else norm
    return "extended" if norm < EXTENDED_PRECISION_NORM else "double"


def run_point(config):
    """Formula versus numerics at one (epsilon, p0) with the refinement gate.

    Starting from dt (default eps/40), the pair (dt, N) and (dt/2, 2N) is
    propagated to a common final time; the relative L2 difference of the
    two lower-band spectra is the solver self-error.  dt is halved until the
    self-error is at most a tenth of the formula-versus-numeric error.  A
    halving that does not at least halve the self-error ends the search:
    the transmitted wave is then too small to resolve above roundoff.
    """
    tic = time.perf_counter()
    model, spec = config.model, config.packet
    eps = config.epsilon
    norm_pred = _predicted_norm(config)
    t0 = config.t0 if config.t0 is not None else _transient_safe_t0(config, norm_pred)
    precision = _precision_for(config, norm_pred)
    t_end = config.t_final if config.t_final is not None else -t0
    dt = config.dt or eps / 40
    history = []
    fixed = config.t_final is not None
    # Room for a few stationarity windows beyond t_end.
    g1 = _grid_for(config, spec, model, t0, t_end if fixed else 1.1 * t_end)
    g2 = Grid1D(g1.x_min, g1.x_max, 2 * g1.n_points, eps)
    for level in range(config.max_halvings + 1):
        steps = int(math.ceil((t_end - t0) / dt))
        dt_eff = (t_end - t0) / steps
        s1, t1, n1, d1 = _numeric_spectrum(g1, spec, model, t0, t_end, dt_eff, fixed, precision)
        # The refined run ends where the coarse one stopped.
        s2, _, _, d2 = _numeric_spectrum(g2, spec, model, t0, t1, dt_eff / 2, True, precision)
        s2c = s2[_common_modes(g1, g2)]
        self_err = relative_l2_error(s1, s2c, g1.dk)
        params = TransitionParams.from_model(model, eps, t1)
        res = formula_transmitted(spec.psi_hat, params, grid=g1, indicator=config.indicator)
        # Headline metric uses the finer solution as the numerical reference.
        rel = relative_l2_error(res.psi_minus_hat, s2c, g1.dk)
        history.append({"dt": dt_eff, "n_points": g1.n_points, "self_error": self_err, "rel_l2_error": rel})
        log.info("eps=%g p0=%g dt=%.3g N=%d self=%.3g rel=%.3g", eps, spec.p0, dt_eff, g1.n_points, self_err, rel)
        if self_err <= rel / 10:
            norm_num = float(np.sqrt(g1.dk * np.sum(np.abs(s2c) ** 2)))
            meta = {
                "dt": dt_eff / 2,
                "grid": {"x_min": g2.x_min, "x_max": g2.x_max, "n_points": g2.n_points},
                "t_final": t1,
                "t0": t0,
                "precision": precision,
                "unitarity_drift": max(d1, d2),
                "gate_history": history,
                "k": g1.k,
                "numeric": s2c,
                "formula": res.psi_minus_hat,
            }
            return ComparisonRecord(eps, spec.p0, res.l2_norm, norm_num, rel, self_err,
                                    time.perf_counter() - tic, meta)
        if level and self_err > history[-2]["self_error"] / 2:
            # Splitting error should drop about fourfold per halving; if it
            # does not, accumulated roundoff dominates and refining cannot help.
            raise GateError(f"self-error stopped decreasing at eps={eps}, p0={spec.p0} "
                            "(roundoff floor)", {"history": history})
        dt = dt_eff / 2
    raise GateError(f"refinement gate failed at eps={eps}, p0={spec.p0}", {"history": history})


def _run_point_safe(config):
    try:
        return run_point(config)
    except GateError as exc:
        return exc


def run_sweep(configs, threads=1, rejected=None):
    """Run every point; records come back in config order.

    Points whose refinement gate fails are dropped from the result and, if
    ``rejected`` is a list, appended to it as (config, diagnostics).
    """
    configs = list(configs)
    for c in configs:
        if not c.model.constant_rho:
            raise ConfigurationError("the sweep needs constant-rho models")
    if threads > 1 and len(configs) > 1:
        with cf.ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_point_safe, configs))
    else:
        results = [_run_point_safe(c) for c in configs]
    records = []
    for c, r in zip(configs, results):
        if isinstance(r, GateError):
            log.warning("rejected point eps=%g p0=%g: %s", c.epsilon, c.p0, r)
            if rejected is not None:
                rejected.append((c, r.diagnostics))
        else:
            records.append(r)
    return records


def run_histories(config, n_range=None, observer: Optional[Callable] = None):
    """Numerical histories t -> ||(1 - Pi_n) psi(t)|| for each n.

    Norms are recorded every HISTORY_EVERY steps.  The curve at the
    representation closest to the optimal one carries the error-function
    model prediction, scaled to its own final plateau.
    """
    n_range = tuple(config.n_range if n_range is None else n_range)
    model, spec = config.model, config.packet
    eps = config.epsilon
    t0 = config.t0 if config.t0 is not None else default_t0(spec, model)
    t_end = config.t_final if config.t_final is not None else -t0
    grid = _grid_for(config, spec, model, t0, t_end)
    table = coefficient_tables(model, max(max(n_range), 1), grid=grid)
    ops = {
        n: ProjectionOperator.build(projection_symbol(table, n, grid=grid, deriv_order=n + 1), eps)
        for n in n_range
    }
    dt = config.dt or eps / 40
    steps = int(math.ceil((t_end - t0) / dt))
    dt = (t_end - t0) / steps
    times, rows = [], []

    def record(s):
        times.append(s.time)
        rows.append([superadiabatic_components(s, None, eps, operator=ops[n]).lower_norm for n in n_range])
        if observer is not None:
            observer(s)

    state = prepare_incoming(spec, model, grid, t0)
    n0 = state.norm()
    record(state)
    final = StrangPropagator(model, grid, dt).evolve(state, steps, record, HISTORY_EVERY)
    if not times or times[-1] != final.time:
        record(final)
    times = np.asarray(times)
    norms = np.asarray(rows)
    meta = {"dt": dt, "grid": {"x_min": grid.x_min, "x_max": grid.x_max, "n_points": grid.n_points},
            "unitarity_drift": abs(final.norm() - n0)}
    curves = [HistoryCurve(n, times, norms[:, i], meta=dict(meta)) for i, n in enumerate(n_range)]
    if spec.shape == GAUSSIAN:
        opt = optimal_representation(spec.p0, spec.sigma2, model, eps)
        n_opt = int(round(opt.n_star))
        for c in curves:
            if c.n == n_opt:
                c.model_prediction = history_error_function_model(spec, model, eps, times, c.norms[-1])
                c.meta["n_star"] = opt.n_star
    return curves


def histories_config(**changes):
    """The histories parameter set: c = -pi/3, alpha = 2 pi/5, delta = 3/32."""
    base = RunConfig(c=-math.pi / 3, alpha=2 * math.pi / 5, delta=3 / 32, p0=2.5, epsilon=0.02923,
                     sigma2=2.0, experiment=HISTORIES)
    return base.replace(**changes) if changes else base


def sweep_config(**changes):
    """The sweep parameter set: c = -pi/3, alpha = pi/2, delta = 1/2."""
    base = RunConfig(c=-math.pi / 3, alpha=math.pi / 2, delta=0.5, p0=5.0, epsilon=0.1)
    return base.replace(**changes) if changes else base


def run_verify(suites=None, mutation=False):
    """Run the invariant suites and return a JSON-serialisable report.

    ``mutation=True`` plants a forbidden entry in the recursion; the zero
    structure suite must then fail.
    """
    from . import checks

    selected = checks.SUITES if suites is None else {k: checks.SUITES[k] for k in suites}
    report = {"suites": [], "passed": True}
    for name, fn in selected.items():
        tic = time.perf_counter()
        try:
            details = fn(mutation=mutation) if name == "zero_structure" else fn()
            ok = all(item["passed"] for item in details)
        except Exception as exc:  # a crashing suite counts as a failure
            details = [{"check": "exception", "passed": False, "detail": repr(exc)}]
            ok = False
        report["suites"].append({"name": name, "passed": ok, "wall_time_s": time.perf_counter() - tic,
                                 "checks": details})
        report["passed"] = report["passed"] and ok
    return report
