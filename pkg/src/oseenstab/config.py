"""Run configuration: a strict TOML file mapped onto dataclass blocks.

Unknown tables or keys are fatal, and every error carries the line number of
the offending entry.  Index gates of the norm suite and basic geometric
sanity checks run at load time so a bad sweep fails before any computation.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .norms import GateError, index_gate

CHECK_IDS = (
    "AC01-projection",
    "AC02-adjoint-identity",
    "AC03-tangentiality",
    "AC04-counterexample",
    "AC05-kalman-rank",
    "AC06-projected-placement",
    "AC07-closed-loop",
    "AC08-nonlinear-decay",
    "AC09-basin-monotone",
    "AC10-realification",
    "AC11-maxreg",
    "AC12-index-gate",
    "AC13-determinism",
)

SIDES = ("left", "right", "bottom", "top", "front", "back")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class MeshConfig:
    dims: tuple = (32, 32)
    lengths: tuple = ()
    d: int = 2
    patch_side: str = "left"
    patch_fraction: float = 0.5
    collar_depth: int = 2


@dataclass
class PhysicsConfig:
    nu0: float = None
    equilibrium: str = "manufactured"     # manufactured | newton | zero
    profile: str = "shear-cell"
    amplitude: float = 2.0
    force_file: str = ""
    newton_max_iter: int = 30


@dataclass
class NormsConfig:
    q: float = 4.0
    p: float = 1.125
    n_t: int = 32


@dataclass
class DesignConfig:
    gamma1_factor: float = 1.0           # gamma1 = factor * |Re lambda_1|
    method: str = "shifted-lqr"
    svd_tol: float = 1e-8
    n_eigs: int = 20
    eig_method: str = "auto"
    projector: str = "schur"
    strategy: str = "greedy-svd"
    max_retries: int = 8


@dataclass
class SimConfig:
    T: float = 0.0                      # 0: 10 / gamma0
    dt: float = 0.0                     # 0: T / 2000
    amplitudes: tuple = (1e-3, 1e-4, 1e-5)
    probe: str = "dominant"             # dominant | random
    probe_seed: int = 0
    contraction_fraction: float = 1 / 3
    basin: bool = True
    basin_max: float = 100.0
    basin_bisections: int = 8
    maxreg_samples: int = 20
    maxreg_T: float = 10.0
    maxreg_dt: float = 0.05


@dataclass
class OutputConfig:
    dir: str = "out"
    log_stride: int = 20
    snapshot_stride: int = 0
    dump_matrices: bool = False
    dump_mesh: bool = True


@dataclass
class VerifyConfig:
    checks: tuple = ("all",)
    samples: int = 10
    adjoint_dims: tuple = (32, 64)
    tangential_dims: tuple = (16, 32, 64)
    maxreg_dims: tuple = (16, 32)


@dataclass
class RunConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    norms: NormsConfig = field(default_factory=NormsConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    source: str = ""

    def to_dict(self):
        d = asdict(self)
        d.pop("source")
        return _jsonable(d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def enabled_checks(self):
        if "all" in self.verify.checks:
            return CHECK_IDS
        return tuple(c for c in CHECK_IDS if c in self.verify.checks)


BLOCKS = {
    "mesh": MeshConfig,
    "physics": PhysicsConfig,
    "norms": NormsConfig,
    "design": DesignConfig,
    "sim": SimConfig,
    "output": OutputConfig,
    "verify": VerifyConfig,
}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _line_index(text):
    """Map (table, key) and table names to 1-based line numbers."""
    where = {}
    table = ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]$", line)
        if m:
            table = m.group(1)
            where.setdefault((table, None), n)
            continue
        m = re.match(r"^([A-Za-z0-9_-]+)\s*=", line)
        if m:
            where.setdefault((table, m.group(1)), n)
    return where


def _number(value, name, line):
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be a number, got {value!r}", line)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{name} must be a number or a fraction string, got {value!r}", line)


def _coerce(default, value, name, line):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false", line)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}", line)
        return value
    if isinstance(default, float) or default is None:
        return _number(value, name, line)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}", line)
        return value
    if isinstance(default, tuple):
        items = value if isinstance(value, list) else [value]
        proto = default[0] if default else None
        if proto is None:
            return tuple(_number(v, name, line) for v in items)
        return tuple(_coerce(proto, v, name, line) for v in items)
    raise ConfigError(f"cannot interpret {name}", line)


def parse_config(text: str, source="<string>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"parse error: {exc}", int(m.group(1)) if m else None) from None
    where = _line_index(text)
    blocks = {}
    for table, values in raw.items():
        line = where.get((table, None), where.get(("", table)))
        if table not in BLOCKS:
            raise ConfigError(f"unknown table [{table}]; expected one of {sorted(BLOCKS)}", line)
        if not isinstance(values, dict):
            raise ConfigError(f"[{table}] must be a table", line)
        cls = BLOCKS[table]
        known = {f.name: f for f in fields(cls)}
        proto = cls()
        kw = {}
        for key, value in values.items():
            kline = where.get((table, key), line)
            if key not in known:
                raise ConfigError(f"unknown key {table}.{key}", kline)
            default = getattr(proto, key)
            if table == "mesh" and key in ("dims", "lengths"):
                default = (1,) if key == "dims" else (1.0,)
            kw[key] = _coerce(default, value, f"{table}.{key}", kline)
        blocks[table] = cls(**kw)
    cfg = RunConfig(**blocks, source=source)
    validate(cfg, where)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not valid UTF-8") from None
    return parse_config(text, str(path))


def validate(cfg: RunConfig, where=None):
    where = where or {}

    def fail(msg, table, key=None):
        raise ConfigError(msg, where.get((table, key), where.get((table, None))))

    m = cfg.mesh
    if m.d not in (2, 3):
        fail(f"mesh.d must be 2 or 3, got {m.d}", "mesh", "d")
    if len(m.dims) == 1:
        m.dims = tuple(m.dims) * m.d
    if len(m.dims) != m.d:
        fail(f"mesh.dims has {len(m.dims)} entries for d={m.d}", "mesh", "dims")
    if min(m.dims) < 4:
        fail("mesh.dims >= 4 violated", "mesh", "dims")
    if not m.lengths:
        m.lengths = (1.0,) * m.d
    elif len(m.lengths) == 1:
        m.lengths = tuple(m.lengths) * m.d
    if len(m.lengths) != m.d or min(m.lengths) <= 0:
        fail("mesh.lengths must be d positive numbers", "mesh", "lengths")
    if m.patch_side not in SIDES[: 2 * m.d] + ("all",):
        fail(f"mesh.patch_side must be one of {SIDES[: 2 * m.d] + ('all',)}", "mesh", "patch_side")
    if m.patch_side == "all" and m.patch_fraction != 1:
        fail("mesh.patch_side = 'all' requires patch_fraction = 1", "mesh", "patch_fraction")
    if not 0 < m.patch_fraction <= 1:
        fail("0 < mesh.patch_fraction <= 1 violated", "mesh", "patch_fraction")
    if m.collar_depth < 1:
        fail("mesh.collar_depth >= 1 violated", "mesh", "collar_depth")

    ph = cfg.physics
    if ph.nu0 is None:
        fail("physics.nu0 required", "physics")
    if not ph.nu0 > 0:
        fail("physics.nu0 > 0 violated", "physics", "nu0")
    if ph.equilibrium not in ("manufactured", "newton", "zero"):
        fail("physics.equilibrium must be manufactured, newton or zero", "physics", "equilibrium")
    from .operators import PROFILES
    if ph.equilibrium != "zero" and not ph.force_file and ph.profile not in PROFILES:
        fail(f"physics.profile must be one of {sorted(PROFILES)}", "physics", "profile")

    n = cfg.norms
    try:
        index_gate(n.q, n.p, m.d)
    except GateError as exc:
        key = "q" if "q > d" in str(exc) else "p"
        raise ConfigError(str(exc), where.get(("norms", key), where.get(("norms", None)))) from None

    dz = cfg.design
    if dz.gamma1_factor <= 0:
        fail("design.gamma1_factor > 0 violated", "design", "gamma1_factor")
    if dz.method not in ("shifted-lqr", "place"):
        fail("design.method must be shifted-lqr or place", "design", "method")
    if dz.eig_method not in ("auto", "dense", "arnoldi"):
        fail("design.eig_method must be auto, dense or arnoldi", "design", "eig_method")
    if dz.projector not in ("schur", "contour"):
        fail("design.projector must be schur or contour", "design", "projector")
    if dz.strategy != "greedy-svd":
        fail("design.strategy must be greedy-svd", "design", "strategy")

    s = cfg.sim
    if s.T < 0 or s.dt < 0:
        fail("sim.T >= 0 and sim.dt >= 0 violated", "sim")
    if s.T > 0 and s.dt > s.T / 100:
        fail("sim.dt <= sim.T/100 violated", "sim", "dt")
    if not s.amplitudes or min(s.amplitudes) <= 0:
        fail("sim.amplitudes must be positive", "sim", "amplitudes")
    if s.probe not in ("dominant", "random"):
        fail("sim.probe must be dominant or random", "sim", "probe")
    if not 0 < s.contraction_fraction <= 1:
        fail("0 < sim.contraction_fraction <= 1 violated", "sim", "contraction_fraction")

    o = cfg.output
    if o.log_stride < 1 or o.snapshot_stride < 0:
        fail("output.log_stride >= 1 and output.snapshot_stride >= 0 violated", "output")

    v = cfg.verify
    bad = [c for c in v.checks if c != "all" and c not in CHECK_IDS]
    if bad:
        fail(f"unknown check id(s) {bad}", "verify", "checks")
    if len(v.adjoint_dims) != 2 or len(v.maxreg_dims) != 2 or len(v.tangential_dims) < 2:
        fail("verify refinement lists need two (adjoint, maxreg) or >= 2 (tangential) sizes", "verify")
    return cfg
