"""
Configuration settings for ScatterLab.

This module handles all configuration management: runtime knobs read from
environment variables (solver tolerances, logging, output locations) and the
versioned JSON experiment document consumed by the command-line front-end.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Custom exception for invalid configuration documents."""
    pass


class Config:
    """Configuration class for ScatterLab."""

    def __init__(self):
        """Initialize configuration from environment variables."""
        # Logging configuration
        self.log_level = os.getenv('SCATTERLAB_LOG_LEVEL', 'INFO').upper()
        self.log_file = os.getenv('SCATTERLAB_LOG_FILE', '')
        self.debug_mode = os.getenv('SCATTERLAB_DEBUG_MODE', 'false').lower() == 'true'

        # Estimator configuration
        self.tol = float(os.getenv('SCATTERLAB_TOL', '1e-11'))
        self.max_iter = int(os.getenv('SCATTERLAB_MAX_ITER', '500'))

        # Deterministic-equivalent solvers
        self.gamma_tol = float(os.getenv('SCATTERLAB_GAMMA_TOL', '1e-12'))
        self.stieltjes_tol = float(os.getenv('SCATTERLAB_STIELTJES_TOL', '1e-12'))
        self.stieltjes_max_iter = int(os.getenv('SCATTERLAB_STIELTJES_MAX_ITER', '5000'))
        self.eta = float(os.getenv('SCATTERLAB_ETA', '1e-4'))
        self.support_threshold = float(os.getenv('SCATTERLAB_SUPPORT_THRESHOLD', '1e-3'))
        self.quadrature_nodes = int(os.getenv('SCATTERLAB_QUADRATURE_NODES', '512'))

        # Weight-function inversion (g^-1 bisection), relative
        self.inversion_tol = float(os.getenv('SCATTERLAB_INVERSION_TOL', '1e-14'))

        # Output and execution
        self.output_dir = os.getenv('SCATTERLAB_OUTPUT_DIR', 'results')
        self.workers = int(os.getenv('SCATTERLAB_WORKERS', '1'))

    def validate_config(self) -> bool:
        """Validate configuration and return True if valid."""
        errors = []

        if self.log_level not in VALID_LOG_LEVELS:
            errors.append(f"SCATTERLAB_LOG_LEVEL must be one of {sorted(VALID_LOG_LEVELS)}")

        for name in ('tol', 'gamma_tol', 'stieltjes_tol', 'eta', 'support_threshold', 'inversion_tol'):
            if getattr(self, name) <= 0:
                errors.append(f"SCATTERLAB_{name.upper()} must be > 0")

        if self.max_iter < 1 or self.stieltjes_max_iter < 1:
            errors.append("Iteration caps must be >= 1")

        if self.quadrature_nodes < 16:
            errors.append("SCATTERLAB_QUADRATURE_NODES must be >= 16")

        if self.workers < 1:
            errors.append("SCATTERLAB_WORKERS must be >= 1")

        # Validate output directory can be created
        out_dir = Path(self.output_dir)
        if not out_dir.exists():
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
            except Exception:
                errors.append(f"Cannot create output directory: {out_dir}")

        if errors:
            logger.error("Configuration validation errors:")
            for error in errors:
                logger.error(f"  - {error}")
            return False

        return True

    def is_production(self) -> bool:
        """Check if running without debug output."""
        return not self.debug_mode

    def get_log_config(self) -> dict:
        """Get logging configuration dictionary."""
        handlers = {
            'console': {
                'class': 'logging.StreamHandler',
                'level': self.log_level,
                'formatter': 'standard' if self.is_production() else 'detailed'
            }
        }
        if self.log_file:
            handlers['file'] = {
                'class': 'logging.FileHandler',
                'filename': self.log_file,
                'level': self.log_level,
                'formatter': 'detailed'
            }
        return {
            'version': 1,
            'disable_existing_loggers': False,
            'formatters': {
                'standard': {
                    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
                },
                'detailed': {
                    'format': '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
                }
            },
            'handlers': handlers,
            'loggers': {
                '': {  # root logger
                    'handlers': list(handlers),
                    'level': self.log_level,
                    'propagate': False
                }
            }
        }

    def __repr__(self) -> str:
        """String representation of configuration."""
        safe_config = {
            'log_level': self.log_level,
            'tol': self.tol,
            'max_iter': self.max_iter,
            'gamma_tol': self.gamma_tol,
            'stieltjes_tol': self.stieltjes_tol,
            'eta': self.eta,
            'output_dir': self.output_dir,
            'workers': self.workers,
            'is_production': self.is_production()
        }
        return f"Config({safe_config})"


# Global configuration instance
config = Config()


# Configuration validation constants
VALID_LOG_LEVELS = {'DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'}


# ---------------------------------------------------------------------------
# Experiment document schema
# ---------------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ScatterSection(_Strict):
    """Population scatter matrix C_N: identity, explicit diagonal, or proportional blocks."""
    kind: Literal['identity', 'diagonal', 'blocks'] = 'identity'
    values: List[float] = Field(default_factory=list)
    proportions: List[float] = Field(default_factory=list)

    @model_validator(mode='after')
    def _check_values(self):
        if self.kind != 'identity' and not self.values:
            raise ValueError(f"scatter kind '{self.kind}' needs values")
        if any(v <= 0 for v in self.values):
            raise ValueError("scatter values must be positive")
        if self.kind == 'blocks':
            if len(self.proportions) != len(self.values):
                raise ValueError("blocks need one proportion per value")
            if abs(sum(self.proportions) - 1.0) > 1e-9 or any(p <= 0 for p in self.proportions):
                raise ValueError("block proportions must be positive and sum to 1")
        return self


class TauSection(_Strict):
    """Texture law; parameters used depend on kind."""
    kind: Literal['constant', 'gamma', 'inverse-chi-square', 'empirical'] = 'gamma'
    value: float = Field(default=1.0, gt=0)
    shape: float = Field(default=0.5, gt=0)
    scale: float = Field(default=2.0, gt=0)
    dof: float = Field(default=5.0, gt=2)
    values: List[float] = Field(default_factory=list)


class ModelSection(_Strict):
    N: int = Field(gt=0)
    n: int = Field(gt=0)
    N_bar: Optional[int] = None
    scatter: ScatterSection = Field(default_factory=ScatterSection)
    tau: TauSection = Field(default_factory=TauSection)

    @model_validator(mode='after')
    def _check_sizes(self):
        if self.n <= self.N:
            raise ValueError("model needs n > N")
        if self.N_bar is not None and self.N_bar < self.N:
            raise ValueError("N_bar must be >= N")
        return self


class WeightSection(_Strict):
    family: Literal['student-type'] = 'student-type'
    alpha: float = Field(default=0.1, gt=0)


class EstimatorSection(_Strict):
    tol: float = Field(default_factory=lambda: config.tol, gt=0)
    max_iter: int = Field(default_factory=lambda: config.max_iter, ge=1)
    init: Literal['identity', 'sample-covariance'] = 'identity'
    route: Literal['matrix', 'd-vector', 'both'] = 'matrix'


class DensitySection(_Strict):
    lo: float = 0.0
    hi: float = 2.5
    step: float = Field(default=0.005, gt=0)
    eta: float = Field(default_factory=lambda: config.eta, gt=0)

    @model_validator(mode='after')
    def _check_grid(self):
        if not self.lo < self.hi:
            raise ValueError("density grid needs lo < hi")
        return self


class ExperimentSection(_Strict):
    sizes: List[List[int]] = Field(default_factory=lambda: [[50, 250], [100, 500], [200, 1000], [400, 2000]])
    reps: int = Field(default=10, ge=1)


class ExperimentConfig(_Strict):
    """The JSON experiment document (schema version 1, unknown keys rejected)."""
    schema_version: Literal[1] = 1
    model: ModelSection
    weight: WeightSection = Field(default_factory=WeightSection)
    estimator: EstimatorSection = Field(default_factory=EstimatorSection)
    density: DensitySection = Field(default_factory=DensitySection)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = Field(default_factory=lambda: config.output_dir)
    format: Literal['csv', 'json'] = 'csv'

    @property
    def c(self) -> float:
        """Aspect ratio c_N = N/n derived from the model section."""
        return self.model.N / self.model.n


def load_experiment_config(path: str) -> ExperimentConfig:
    """Read and validate an experiment document, raising ConfigError on any defect."""
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            document = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {str(e)}")
    return parse_experiment_config(document)


def parse_experiment_config(document: dict) -> ExperimentConfig:
    """Validate an already-decoded experiment document."""
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}")
