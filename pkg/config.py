"""
Configuration settings for the HFB lab.

Process-level settings come from the environment (optionally a .env file);
per-run settings come from a JSON run file validated section by section.
"""
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import structlog
from dotenv import load_dotenv
from marshmallow import RAISE, Schema, ValidationError, fields, post_load, validate

from grid import Grid
from models import ConfigError
from potential import PROFILES, PotentialSpec

# Load environment variables from .env file
load_dotenv()


class Config:
    """Environment configuration."""

    OUTPUT_DIR = os.environ.get('HFB_OUTPUT_DIR') or 'runs'
    SEED = int(os.environ.get('HFB_SEED', 0))
    LOG_LEVEL = (os.environ.get('HFB_LOG_LEVEL') or 'INFO').upper()
    LOG_FORMAT = (os.environ.get('HFB_LOG_FORMAT') or 'console').lower()
    MAX_FOCK_DIM = int(float(os.environ.get('HFB_MAX_FOCK_DIM', 2e5)))
    WORKERS = int(os.environ.get('HFB_WORKERS', 1))


def configure_logging(level: Optional[str] = None, fmt: Optional[str] = None):
    """Route stdlib logging through structlog with a console or JSON renderer."""
    level = (level or Config.LOG_LEVEL).upper()
    fmt = fmt or Config.LOG_FORMAT
    renderer = structlog.processors.JSONRenderer() if fmt == 'json' else structlog.dev.ConsoleRenderer(colors=False)
    shared = [
        structlog.stdlib.add_log_level,
        structlog.stdlib.add_logger_name,
        structlog.processors.TimeStamper(fmt='iso'),
    ]
    structlog.configure(
        processors=shared + [structlog.stdlib.ProcessorFormatter.wrap_for_formatter],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(structlog.stdlib.ProcessorFormatter(foreign_pre_chain=shared, processors=[
        structlog.stdlib.ProcessorFormatter.remove_processors_meta, renderer]))
    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(getattr(logging, level, logging.INFO))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for all random data."""
    return np.random.Generator(np.random.Philox(seed))


# ============================================================================
# RUN FILE SECTIONS
# ============================================================================

@dataclass(frozen=True)
class InitialConfig:
    phi_profile: str = 'gaussian'
    phi_width: float = 0.6
    phi_center: Optional[float] = None
    phi_momentum: int = 0
    k_mode: str = 'zero'
    pair_amplitude: float = 0.2
    pair_width: float = 0.5
    correction_profile: str = 'bump'
    correction_amplitude: float = 0.5
    correction_width: float = 1.0


@dataclass(frozen=True)
class TimeConfig:
    T: float = 0.5
    dt: Optional[float] = None
    scheme: str = 'strang'
    output_cadence: int = 10


@dataclass(frozen=True)
class OracleConfig:
    enabled: bool = False
    modes: int = 3
    n_max_policy: str = 'poisson'
    n_max: Optional[int] = None
    krylov_tol: float = 1e-10
    tail_bound: float = 1e-8


@dataclass(frozen=True)
class DiagnosticsConfig:
    enabled: bool = True
    epsilon: float = 0.1
    s_list: List[float] = field(default_factory=lambda: [0.5])
    bbgky: bool = True


@dataclass(frozen=True)
class OutputConfig:
    directory: Optional[str] = None
    seed: Optional[int] = None


@dataclass(frozen=True)
class RunConfig:
    """A validated run file."""

    grid: Grid = field(default_factory=Grid)
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    eta: float = 1.0
    initial: InitialConfig = field(default_factory=InitialConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def scaled_potential(self) -> PotentialSpec:
        """Potential with the amplitude multiplied by the interaction scale eta."""
        p = self.potential
        return PotentialSpec(p.profile, p.amplitude * self.eta, p.sigma, p.beta, p.N)

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data echo that load_run_config accepts back."""
        potential = self.potential.to_dict()
        potential['eta'] = self.eta
        return {
            'grid': self.grid.to_dict(),
            'potential': potential,
            'initial': asdict(self.initial),
            'time': asdict(self.time),
            'oracle': asdict(self.oracle),
            'diagnostics': {**asdict(self.diagnostics), 's_list': list(self.diagnostics.s_list)},
            'output': asdict(self.output),
        }


class _Section(Schema):
    class Meta:
        unknown = RAISE


class GridSchema(_Section):
    d = fields.Integer(load_default=1, validate=validate.OneOf([1, 2, 3]))
    n = fields.Integer(load_default=64, validate=validate.OneOf([2 ** k for k in range(3, 11)]))
    L = fields.Float(load_default=2 * np.pi, validate=validate.Range(min=0, min_inclusive=False))

    @post_load
    def build(self, data, **kwargs):
        return Grid(**data)


class PotentialSchema(_Section):
    profile = fields.String(load_default='gaussian', validate=validate.OneOf(list(PROFILES)))
    amplitude = fields.Float(load_default=1.0, validate=validate.Range(min=0))
    sigma = fields.Float(load_default=0.5, validate=validate.Range(min=0, min_inclusive=False))
    beta = fields.Float(load_default=0.5, validate=validate.Range(min=0, max=1))
    N = fields.Integer(load_default=16, validate=validate.Range(min=1))
    eta = fields.Float(load_default=1.0, validate=validate.Range(min=0))


class InitialSchema(_Section):
    phi_profile = fields.String(load_default='gaussian',
                                validate=validate.OneOf(['gaussian', 'plane_wave', 'random_smooth']))
    phi_width = fields.Float(load_default=0.6, validate=validate.Range(min=0, min_inclusive=False))
    phi_center = fields.Float(load_default=None, allow_none=True)
    phi_momentum = fields.Integer(load_default=0)
    k_mode = fields.String(load_default='zero', validate=validate.OneOf(['zero', 'gaussian_pair', 'pair_corrected']))
    pair_amplitude = fields.Float(load_default=0.2)
    pair_width = fields.Float(load_default=0.5, validate=validate.Range(min=0, min_inclusive=False))
    correction_profile = fields.String(load_default='bump', validate=validate.OneOf(list(PROFILES)))
    correction_amplitude = fields.Float(load_default=0.5, validate=validate.Range(min=0))
    correction_width = fields.Float(load_default=1.0, validate=validate.Range(min=0, min_inclusive=False))

    @post_load
    def build(self, data, **kwargs):
        return InitialConfig(**data)


class TimeSchema(_Section):
    T = fields.Float(load_default=0.5, validate=validate.Range(min=0))
    dt = fields.Float(load_default=None, allow_none=True, validate=validate.Range(min=0, min_inclusive=False))
    scheme = fields.String(load_default='strang', validate=validate.OneOf(['strang', 'rk4-mol']))
    output_cadence = fields.Integer(load_default=10, validate=validate.Range(min=1))

    @post_load
    def build(self, data, **kwargs):
        return TimeConfig(**data)


class OracleSchema(_Section):
    enabled = fields.Boolean(load_default=False)
    modes = fields.Integer(load_default=3, validate=validate.Range(min=1, max=8))
    n_max_policy = fields.String(load_default='poisson', validate=validate.OneOf(['poisson', 'fixed']))
    n_max = fields.Integer(load_default=None, allow_none=True, validate=validate.Range(min=1))
    krylov_tol = fields.Float(load_default=1e-10, validate=validate.Range(min=0, min_inclusive=False))
    tail_bound = fields.Float(load_default=1e-8, validate=validate.Range(min=0, min_inclusive=False))

    @post_load
    def build(self, data, **kwargs):
        return OracleConfig(**data)


class DiagnosticsSchema(_Section):
    enabled = fields.Boolean(load_default=True)
    epsilon = fields.Float(load_default=0.1, validate=validate.Range(min=0, max=1.5))
    s_list = fields.List(fields.Float(validate=validate.Range(min=-2, max=2)), load_default=lambda: [0.5])
    bbgky = fields.Boolean(load_default=True)

    @post_load
    def build(self, data, **kwargs):
        return DiagnosticsConfig(**data)


class OutputSchema(_Section):
    directory = fields.String(load_default=None, allow_none=True)
    seed = fields.Integer(load_default=None, allow_none=True, validate=validate.Range(min=0))

    @post_load
    def build(self, data, **kwargs):
        return OutputConfig(**data)


class RunConfigSchema(_Section):
    grid = fields.Nested(GridSchema, load_default=dict)
    potential = fields.Nested(PotentialSchema, load_default=dict)
    initial = fields.Nested(InitialSchema, load_default=dict)
    time = fields.Nested(TimeSchema, load_default=dict)
    oracle = fields.Nested(OracleSchema, load_default=dict)
    diagnostics = fields.Nested(DiagnosticsSchema, load_default=dict)
    output = fields.Nested(OutputSchema, load_default=dict)

    @post_load
    def build(self, data, **kwargs):
        # nested load_default values bypass the nested schema
        for name, schema in (('grid', GridSchema), ('potential', PotentialSchema), ('initial', InitialSchema),
                             ('time', TimeSchema), ('oracle', OracleSchema),
                             ('diagnostics', DiagnosticsSchema), ('output', OutputSchema)):
            if isinstance(data[name], dict):
                data[name] = schema().load(data[name])
        potential = dict(data['potential'])
        eta = potential.pop('eta')
        data['potential'] = PotentialSpec(**potential)
        return RunConfig(eta=eta, **data)


def load_run_config(source: Any = None) -> RunConfig:
    """
    Validate a run file into a RunConfig.

    Args:
        source: Path to a JSON file, an already-parsed dict, or None for all defaults

    Raises:
        ConfigError: unreadable file, unknown keys or out-of-range values
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        try:
            with open(source, 'r', encoding='utf-8') as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"Cannot read run file {source}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError('Run file must hold a JSON object')
    try:
        return RunConfigSchema().load(raw)
    except ValidationError as exc:
        raise ConfigError('Invalid run file', exc.messages) from exc


def resolve_seed(flag: Optional[int], cfg: RunConfig) -> int:
    """--seed flag, else run file, else HFB_SEED."""
    if flag is not None:
        return int(flag)
    if cfg.output.seed is not None:
        return int(cfg.output.seed)
    return Config.SEED


def resolve_output_dir(flag: Optional[str], cfg: RunConfig) -> str:
    return flag or cfg.output.directory or Config.OUTPUT_DIR
