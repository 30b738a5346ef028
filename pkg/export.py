"""
Export module for the HFB lab.
Writes monitor and sweep tables as CSV, run summaries as JSON and full
trajectories as compressed numpy archives, and reads trajectories back.
"""
import json
import logging
import os
import zipfile
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from dynamics import HFBState, Trajectory
from grid import Grid
from models import ConfigError, TrajectoryError
from potential import PotentialSpec

# Configure logging
logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'

# Leading CSV columns of a trajectory table
MONITOR_COLUMNS = ['t', 'trace_gamma', 'energy', 'sym_residual_lambda', 'herm_residual_gamma',
                   'l2_sh2k', 'linf_sh2k']


# ============================================================================
# UTILITY FUNCTIONS
# ============================================================================

def ensure_directory(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _plain(value: Any) -> Any:
    """JSON-safe copy of numpy scalars, arrays and nested containers."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return str(value)
    return value


# ============================================================================
# TABLES
# ============================================================================

def monitors_frame(traj: Trajectory) -> pd.DataFrame:
    """Per-step monitor records with the documented leading columns."""
    df = pd.DataFrame(traj.monitors)
    leading = [c for c in MONITOR_COLUMNS if c in df.columns]
    rest = [c for c in df.columns if c not in leading]
    return df[leading + rest]


def write_table(df: pd.DataFrame, path: str) -> str:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(df)} rows to {path}")
    return path


def write_monitors(traj: Trajectory, path: str) -> str:
    return write_table(monitors_frame(traj), path)


def write_rows(rows: Iterable[Dict[str, Any]], path: str, columns: Optional[List[str]] = None) -> str:
    df = pd.DataFrame(list(rows))
    if columns:
        df = df[[c for c in columns if c in df.columns] + [c for c in df.columns if c not in columns]]
    return write_table(df, path)


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


# ============================================================================
# SUMMARIES
# ============================================================================

def write_summary(summary: Dict[str, Any], path: str) -> str:
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(_plain(summary), fh, indent=2, sort_keys=True)
    logger.info(f"Wrote summary to {path}")
    return path


def read_summary(path: str) -> Dict[str, Any]:
    with open(path, 'r', encoding='utf-8') as fh:
        return json.load(fh)


# ============================================================================
# TRAJECTORIES
# ============================================================================

def save_trajectory(traj: Trajectory, path: str) -> str:
    """Frames, times, grid and potential in one compressed archive."""
    if not traj.frames:
        raise TrajectoryError('Cannot save an empty trajectory')
    first = traj.frames[0]
    np.savez_compressed(
        path,
        t=traj.times,
        phi=traj.stack('phi'),
        lam=traj.stack('lam'),
        gam=traj.stack('gam'),
        grid=np.array(json.dumps(first.grid.to_dict())),
        potential=np.array(json.dumps(first.potential.to_dict())),
        flags=np.array(json.dumps(traj.flags)),
    )
    return path


def load_trajectory(path: str) -> Trajectory:
    """
    Read an archive written by save_trajectory.

    Raises:
        TrajectoryError: missing, unreadable or inconsistent archive
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            times = data['t']
            phi, lam, gam = data['phi'], data['lam'], data['gam']
            grid = Grid(**json.loads(str(data['grid'])))
            potential = PotentialSpec(**json.loads(str(data['potential'])))
            flags = json.loads(str(data['flags'])) if 'flags' in data.files else []
    except (OSError, EOFError, KeyError, ValueError, zipfile.BadZipFile, ConfigError) as exc:
        raise TrajectoryError(f"Cannot read trajectory {path}: {exc}") from exc

    count = len(times)
    if count == 0:
        raise TrajectoryError(f"Trajectory {path} has no frames")
    if not (phi.shape == (count, grid.size) and lam.shape == gam.shape == (count, grid.size, grid.size)):
        raise TrajectoryError(f"Trajectory {path} has inconsistent array shapes")
    if not all(np.all(np.isfinite(a)) for a in (times, phi, lam, gam)):
        raise TrajectoryError(f"Trajectory {path} holds non-finite values")

    traj = Trajectory(flags=list(flags))
    try:
        for i in range(count):
            traj.append_frame(HFBState(grid, potential, float(times[i]), phi[i], lam[i], gam[i]))
    except ValueError as exc:
        raise TrajectoryError(f"Trajectory {path}: {exc}") from exc
    return traj
