"""Scenario configuration: TOML parsing, validation, overrides, echo.

A scenario file fully determines a benchmark run: system geometry, true and
nominal noise models, robustness parameters, Monte Carlo layout, and (for
closed-loop scenarios) the controller. The raw parsed mapping is the
canonical representation; typed accessors build the library objects from it.
Geometry values that the source experiments do not publish carry a
``provenance = "non-paper-default"`` marker in the bundled files.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .ambiguity import CurvatureConstants
from .errors import ConfigError
from .filters import EnvelopeConfig
from .mpc import MpcConfig, Obstacle
from .psdcore import GaussianLaw, PsdMatrix
from .systems import ct_system, unicycle_system

VALID_ESTIMATORS = ("ekf_nominal", "ekf_true", "drekf")
BUILTIN_TEMPLATES = ("ct_tracking", "safe_nav")


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v != v or v in (float("inf"), float("-inf")):
            raise ConfigError("<emit>", "non-finite numbers are not representable")
        r = repr(v)
        return r if ("." in r or "e" in r or "E" in r) else r + ".0"
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ConfigError("<emit>", f"cannot serialize value of type {type(v).__name__}")


def emit_toml(data, prefix=""):
    """Serialize a nested mapping to TOML, deterministically ordered."""
    lines = []
    scalars = {k: v for k, v in data.items() if not isinstance(v, dict)
               and not (isinstance(v, list) and v and isinstance(v[0], dict))}
    tables = {k: v for k, v in data.items() if isinstance(v, dict)}
    table_arrays = {
        k: v for k, v in data.items()
        if isinstance(v, list) and v and isinstance(v[0], dict)
    }
    for k, v in scalars.items():
        lines.append(f"{k} = {_fmt_value(v)}")
    for k, v in tables.items():
        name = f"{prefix}{k}"
        lines.append("")
        lines.append(f"[{name}]")
        lines.append(emit_toml(v, prefix=f"{name}."))
    for k, entries in table_arrays.items():
        name = f"{prefix}{k}"
        for entry in entries:
            lines.append("")
            lines.append(f"[[{name}]]")
            lines.append(emit_toml(entry, prefix=f"{name}."))
    return "\n".join(line for line in lines if line is not None).strip("\n")


def parse_override(expr):
    """Split a ``dotted.key=value`` override; value parsed as a TOML literal."""
    if "=" not in expr:
        raise ConfigError(expr, "override must have the form key=value")
    key, raw = expr.split("=", 1)
    key = key.strip()
    raw = raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    return key, value


def apply_overrides(data, overrides):
    """Apply dotted-key overrides to the raw mapping, before validation."""
    for expr in overrides:
        key, value = parse_override(expr)
        if key == "omega0":
            # Sweep convenience: set only the true initial turn rate,
            # keeping the nominal model fixed.
            mean = list(data.setdefault("true_model", {}).get("x0_mean", []))
            if len(mean) != 5:
                raise ConfigError("omega0", "only valid for the 5-state ct system")
            mean[4] = float(value)
            data["true_model"]["x0_mean"] = mean
            continue
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"'{p}' is not a table")
        node[parts[-1]] = value
    return data


def _require(data, path, typ=None):
    node = data
    for p in path.split("."):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(path, "missing required key")
        node = node[p]
    if typ is not None and not isinstance(node, typ):
        raise ConfigError(path, f"expected {typ.__name__}")
    return node


def _cov_from(table, key_prefix, dim, context):
    """Read a covariance given either as a diagonal or a full matrix."""
    diag_key = f"{key_prefix}_cov_diag"
    full_key = f"{key_prefix}_cov"
    if diag_key in table:
        diag = np.asarray(table[diag_key], dtype=float)
        if diag.shape != (dim,):
            raise ConfigError(f"{context}.{diag_key}", f"expected {dim} entries")
        mat = np.diag(diag)
    elif full_key in table:
        mat = np.asarray(table[full_key], dtype=float)
        if mat.shape != (dim, dim):
            raise ConfigError(f"{context}.{full_key}", f"expected a {dim}x{dim} matrix")
    else:
        raise ConfigError(f"{context}.{diag_key}", "missing covariance")
    try:
        return PsdMatrix.from_array(mat)
    except ValueError as err:
        raise ConfigError(f"{context}.{full_key if full_key in table else diag_key}", str(err)) from err


@dataclass
class ModelLaws:
    """Initial-state, process, and measurement noise laws of one model."""

    init: GaussianLaw
    process: GaussianLaw
    measurement: GaussianLaw


class ScenarioConfig:
    """Validated scenario; the raw mapping stays canonical for echo/round-trip."""

    def __init__(self, data):
        self.data = data
        self._validate()

    # -- equality on the canonical mapping ---------------------------------

    def __eq__(self, other):
        return isinstance(other, ScenarioConfig) and self.data == other.data

    # -- validation ---------------------------------------------------------

    def _validate(self):
        d = self.data
        self.scenario_id = _require(d, "scenario.id", str)
        self.system_id = _require(d, "scenario.system", str)
        if self.system_id not in ("ct", "unicycle"):
            raise ConfigError("scenario.system", f"unknown system '{self.system_id}'")
        self.dt = float(_require(d, "scenario.dt"))
        if self.dt <= 0:
            raise ConfigError("scenario.dt", "must be positive")
        self.horizon = int(_require(d, "scenario.horizon"))
        if self.horizon < 1:
            raise ConfigError("scenario.horizon", "must be >= 1")
        self.runs = int(_require(d, "scenario.runs"))
        if self.runs < 1:
            raise ConfigError("scenario.runs", "must be >= 1")
        self.seed = int(_require(d, "scenario.seed"))
        self.estimators = tuple(_require(d, "scenario.estimators", list))
        for e in self.estimators:
            if e not in VALID_ESTIMATORS:
                raise ConfigError("scenario.estimators", f"unknown estimator '{e}'")
        if not self.estimators:
            raise ConfigError("scenario.estimators", "at least one estimator required")

        n_x = 5 if self.system_id == "ct" else 3
        self.n_x = n_x
        sys_table = d.get("system", {})
        if self.system_id == "unicycle":
            beacons = sys_table.get("beacons", [[1.0, 1.0], [14.0, 1.0], [7.5, 9.0]])
            self.beacons = tuple(tuple(float(v) for v in b) for b in beacons)
            self.n_y = len(self.beacons) + 1
        else:
            self.beacons = None
            self.n_y = 2
        self.range_floor = float(sys_table.get("range_floor", 1e-6))

        self.true_laws = self._laws("true_model")
        self.nominal_laws = self._laws("nominal_model")
        if self.nominal_laws.init.cov.min_eig() <= 0:
            raise ConfigError("nominal_model.x0_cov", "nominal covariances must be PD")
        if self.nominal_laws.process.cov.min_eig() <= 0:
            raise ConfigError("nominal_model.w_cov", "nominal covariances must be PD")
        if self.nominal_laws.measurement.cov.min_eig() <= 0:
            raise ConfigError("nominal_model.v_cov", "nominal covariances must be PD")

        rob = d.get("robust", {})
        theta = rob.get("theta", 0.0)
        self.theta = (
            tuple(float(v) for v in theta) if isinstance(theta, list) else float(theta)
        )
        if np.any(np.asarray(self.theta) < 0):
            raise ConfigError("robust.theta", "must be nonnegative")
        curv = rob.get("curvature", {})
        try:
            self.curvature = CurvatureConstants(
                l_f=float(curv.get("l_f", 0.0)),
                l_h=float(curv.get("l_h", 0.0)),
                alpha_f=float(curv.get("alpha_f", np.sqrt(3.0))),
                alpha_h=float(curv.get("alpha_h", np.sqrt(3.0))),
            )
        except ValueError as err:
            raise ConfigError("robust.curvature", str(err)) from err
        mode = rob.get("envelope_mode", "pathwise")
        try:
            self.envelopes = EnvelopeConfig(
                mode=mode,
                a_seq=tuple(rob.get("envelope_a", ())),
                m_seq=tuple(rob.get("envelope_m", ())),
                k_seq=tuple(rob.get("envelope_k", ())),
            )
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError("robust.envelope_mode", str(err)) from err
        self.radius_cap = float(rob.get("radius_cap", np.inf))
        solver = rob.get("solver", {})
        self.tol_obj = float(solver.get("tol_obj", 1e-7))
        self.max_iters = int(solver.get("max_iters", 5000))

        region = d.get("operating_region")
        if region is not None:
            lo = np.asarray(_require(d, "operating_region.lower"), dtype=float)
            hi = np.asarray(_require(d, "operating_region.upper"), dtype=float)
            if lo.shape != (n_x,) or hi.shape != (n_x,):
                raise ConfigError("operating_region", f"bounds must have {n_x} entries")
            self.operating_region = (lo, hi)
        else:
            self.operating_region = None

        self.mpc_table = d.get("mpc")
        if self.system_id == "unicycle" and self.mpc_table is None:
            raise ConfigError("mpc", "closed-loop unicycle scenario requires [mpc]")
        self.goal_tol = (
            float(self.mpc_table.get("goal_tol", 0.3)) if self.mpc_table else None
        )

    def _laws(self, section):
        d = _require(self.data, section, dict)
        n_x, n_y = self.n_x, self.n_y
        x0_mean = np.asarray(_require(self.data, f"{section}.x0_mean"), dtype=float)
        if x0_mean.shape != (n_x,):
            raise ConfigError(f"{section}.x0_mean", f"expected {n_x} entries")
        w_mean = np.asarray(d.get("w_mean", np.zeros(n_x)), dtype=float)
        v_mean = np.asarray(d.get("v_mean", np.zeros(n_y)), dtype=float)
        if w_mean.shape != (n_x,):
            raise ConfigError(f"{section}.w_mean", f"expected {n_x} entries")
        if v_mean.shape != (n_y,):
            raise ConfigError(f"{section}.v_mean", f"expected {n_y} entries")
        return ModelLaws(
            init=GaussianLaw(x0_mean, _cov_from(d, "x0", n_x, section)),
            process=GaussianLaw(w_mean, _cov_from(d, "w", n_x, section)),
            measurement=GaussianLaw(v_mean, _cov_from(d, "v", n_y, section)),
        )

    # -- builders ------------------------------------------------------------

    def build_system(self):
        if self.system_id == "ct":
            return ct_system(
                dt=self.dt,
                range_floor=self.range_floor,
                operating_region=self.operating_region,
            )
        return unicycle_system(
            dt=self.dt,
            beacons=self.beacons,
            range_floor=self.range_floor,
            operating_region=self.operating_region,
        )

    def build_mpc_config(self):
        if self.mpc_table is None:
            return None
        t = self.mpc_table
        obstacles = tuple(
            Obstacle(tuple(float(v) for v in o["center"]), float(o["radius"]))
            for o in t.get("obstacles", [])
        )
        try:
            return MpcConfig(
                horizon=int(t.get("horizon", 12)),
                q=float(t.get("q", 5.0)),
                r_s=float(t.get("r_s", 0.5)),
                r_omega=float(t.get("r_omega", 0.5)),
                q_f=float(t.get("q_f", 20.0)),
                s_max=float(t.get("s_max", 1.5)),
                omega_max=float(t.get("omega_max", 2.0)),
                goal=tuple(float(v) for v in t.get("goal", (0.0, 0.0))),
                obstacles=obstacles,
                kappa_sigma=float(t.get("kappa_sigma", 1.645)),
                d_min_base=float(t.get("d_min_base", 0.0)),
                max_scp_iters=int(t.get("max_scp_iters", 30)),
                control_tol=float(t.get("control_tol", 1e-4)),
            )
        except ValueError as err:
            raise ConfigError("mpc", str(err)) from err

    def echo(self):
        return emit_toml(self.data) + "\n"


def load_config(path, overrides=()):
    """Load, override, validate. Raises :class:`ConfigError` on bad input."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(str(path), f"TOML parse error: {err}") from None
    apply_overrides(data, overrides)
    return ScenarioConfig(data)


def load_template(name, overrides=()):
    """Load one of the bundled scenario templates by name."""
    if name not in BUILTIN_TEMPLATES:
        raise ConfigError("template", f"unknown template '{name}'")
    text = (
        importlib.resources.files("drekf")
        .joinpath(f"configs/{name}.toml")
        .read_text()
    )
    data = tomllib.loads(text)
    apply_overrides(data, overrides)
    return ScenarioConfig(data)
