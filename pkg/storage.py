"""
Result file operations for ScatterLab.

This module handles all output emission: eigenvalue lists, density curves,
experiment tables, raw samples and JSON documents, written below one output
directory. Floats are written with 17 significant digits so that reading a file
back returns bit-identical values.
"""

import csv
import json
import logging
import os
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Sequence, TextIO, Tuple

import numpy as np

from models import SpectralDensity

logger = logging.getLogger(__name__)

EIGENVALUE_HEADER = ['eigenvalue']
DENSITY_HEADER = ['x', 'density']


class StorageError(Exception):
    """Custom exception for output file operations."""
    pass


def format_float(value: float) -> str:
    """Exact decimal rendering of a double (17 significant digits)."""
    return f"{float(value):.16e}"


class ResultStore:
    """Output directory manager; every file operation goes through open_output."""

    def __init__(self, output_dir: str = "results"):
        """Initialize store and ensure the output directory exists."""
        self.output_dir = output_dir
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as e:
            raise StorageError(f"Cannot create output directory {output_dir}: {str(e)}")

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    @contextmanager
    def open_output(self, name: str, mode: str = 'w') -> Iterator[TextIO]:
        """Context manager for one output file; failures surface as StorageError."""
        full_path = self.path(name)
        try:
            with open(full_path, mode, newline='', encoding='utf-8') as handle:
                yield handle
        except (OSError, csv.Error, ValueError) as e:
            raise StorageError(f"File operation on {full_path} failed: {str(e)}")

    # Eigenvalue files
    def write_eigenvalues(self, name: str, eigenvalues: Sequence[float]) -> str:
        """Write one header line `eigenvalue` then one value per line."""
        with self.open_output(name) as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(EIGENVALUE_HEADER)
            for value in np.asarray(eigenvalues, dtype=float):
                writer.writerow([format_float(value)])
        logger.debug(f"Wrote {len(eigenvalues)} eigenvalues to {self.path(name)}")
        return self.path(name)

    def read_eigenvalues(self, name: str) -> np.ndarray:
        with self.open_output(name, 'r') as handle:
            rows = list(csv.reader(handle))
            if not rows or rows[0] != EIGENVALUE_HEADER:
                raise StorageError(f"{name} is not an eigenvalue file")
            return np.array([float(row[0]) for row in rows[1:]])

    # Density files
    def write_density(self, name: str, density: SpectralDensity) -> str:
        """Write the density curve with header `x,density`."""
        with self.open_output(name) as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(DENSITY_HEADER)
            for x, value in zip(density.grid, density.values):
                writer.writerow([format_float(x), format_float(value)])
        return self.path(name)

    def read_density(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Read back (grid, values) from a density file."""
        with self.open_output(name, 'r') as handle:
            rows = list(csv.reader(handle))
            if not rows or rows[0] != DENSITY_HEADER:
                raise StorageError(f"{name} is not a density file")
            grid = np.array([float(row[0]) for row in rows[1:]])
            values = np.array([float(row[1]) for row in rows[1:]])
            return grid, values

    # Tables
    def write_table(self, name: str, rows: List[Dict[str, Any]]) -> str:
        """Write a list of flat records as CSV; the first record fixes the columns."""
        if not rows:
            raise StorageError(f"Refusing to write empty table {name}")
        columns = list(rows[0].keys())
        with self.open_output(name) as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_render_cell(row[col]) for col in columns])
        logger.debug(f"Wrote {len(rows)} rows to {self.path(name)}")
        return self.path(name)

    def read_table(self, name: str) -> List[Dict[str, str]]:
        with self.open_output(name, 'r') as handle:
            return list(csv.DictReader(handle))

    # Samples
    def write_sample(self, name: str, X: np.ndarray, taus: Sequence[float]) -> str:
        """Write the textures as the first row, then one row per coordinate of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        with self.open_output(name) as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow([format_float(t) for t in taus])
            for row in X:
                writer.writerow([format_float(v) for v in row])
        return self.path(name)

    def read_sample(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Read back (X, taus)."""
        with self.open_output(name, 'r') as handle:
            rows = list(csv.reader(handle))
            if len(rows) < 2:
                raise StorageError(f"{name} holds no sample")
            taus = np.array([float(v) for v in rows[0]])
            X = np.array([[float(v) for v in row] for row in rows[1:]])
            return X, taus

    # JSON documents
    def write_json(self, name: str, document: Dict[str, Any]) -> str:
        with self.open_output(name) as handle:
            handle.write(json.dumps(document, indent=2))
        return self.path(name)

    def read_json(self, name: str) -> Dict[str, Any]:
        with self.open_output(name, 'r') as handle:
            try:
                return json.load(handle)
            except json.JSONDecodeError as e:
                raise StorageError(f"{name} is not valid JSON: {str(e)}")

    def health_check(self) -> bool:
        """Check that the output directory is writable."""
        try:
            with self.open_output('.write_check') as handle:
                handle.write('ok')
            os.remove(self.path('.write_check'))
            return True
        except (StorageError, OSError):
            return False


def _render_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)
