import timeit
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from src.errors import CacheError, ConfigError, PreconditionError
from src.grid.grid_core import GridFunction, GridSpec, SetIndicator, make_grid
from src.operators.kernel_weights import KernelWeights
from utils.file_utils import setup_logger, log_stage_timing

######################
#     CONFIGURATION
######################

CACHE_FORMAT_VERSION = "2"
GRID_TAG = "grid"
CELLS_TAG = "cells"
EXPECTED_SECONDS_PER_ROW = 1e-5

# flag spellings that differ from the parameter they set
KEY_ALIASES = {"lambda": "lam", "Lambda": "Lam"}

logger = setup_logger(__name__)


#########################
#     HELPER FUNCTIONS
#########################


def normalize_key(key: str) -> str:
    """`n-cells`, `n_cells` and `--n-cells` all name the n_cells parameter."""
    key = key.strip().lstrip("-")
    return KEY_ALIASES.get(key, key.replace("-", "_"))


def _comment_lines(path: Path) -> List[str]:
    """Leading `#` lines without the marker."""
    lines = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            lines.append(line[1:].strip())
    return lines


def _tagged_header(path: Path, tag: str) -> Dict[str, str]:
    """Parse a `# <tag> key=value key=value` line."""
    for line in _comment_lines(path):
        words = line.split()
        if words and words[0] == tag:
            return dict(word.split("=", 1) for word in words[1:])
    raise PreconditionError(f"{path} has no '# {tag} ...' header line")


def _spec_from_header(header: Dict[str, str]) -> GridSpec:
    try:
        exterior_radius = header.get("exterior_radius")
        return make_grid(
            int(header["dim"]),
            int(header["n_cells"]),
            float(header["half_width"]),
            None if exterior_radius is None else float(exterior_radius),
        )
    except KeyError as e:
        raise PreconditionError(f"grid header is missing {e}")


def _read_table(path: Path, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    frame = pd.read_csv(path, comment="#")
    columns = [f"x{d}" for d in range(dim)]
    missing = [c for c in columns + ["value"] if c not in frame.columns]
    if missing:
        raise PreconditionError(f"{path} is missing columns {missing}")
    return frame[columns].to_numpy(dtype=float), frame["value"].to_numpy(dtype=float)


#########################
#     MAIN FUNCTIONS
#########################


def read_config(path: Path, allowed: Iterable[str]) -> Dict[str, str]:
    """
    Read `key = value` lines into a parameter mapping.

    Raises:
        ConfigError: If the file is missing, a line has no value, or a key is unknown.
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"Config file not found: {path}")
        raise ConfigError(f"config file not found: {path}")

    allowed = set(allowed)
    config = {}
    for key, value in dotenv_values(path).items():
        name = normalize_key(key)
        if value is None:
            raise ConfigError(f"config key {key!r} has no value")
        if name not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        config[name] = value
    logger.info(f"Read {len(config)} config keys from {path}")
    return config


def read_grid_function(path: Path) -> GridFunction:
    """
    Load a grid function CSV. Nodes the file does not list take the exterior value.

    Raises:
        FileNotFoundError: If the file does not exist.
        PreconditionError: If the header or a coordinate does not fit the grid.
    """
    path = Path(path)
    logger.info(f"Attempting to load grid function from: {path}")
    start_time = timeit.default_timer()
    if not path.is_file():
        logger.error(f"File not found: {path}")
        raise FileNotFoundError(f"Failed to load grid function: {path}")

    header = _tagged_header(path, GRID_TAG)
    spec = _spec_from_header(header)
    exterior = float(header.get("exterior", 0.0))
    coordinates, values = _read_table(path, spec.dim)

    nodes = np.rint(coordinates / spec.h).astype(np.int64)
    if np.any(np.abs(nodes * spec.h - coordinates) > 1e-9 * max(1.0, spec.exterior_radius)):
        raise PreconditionError(f"{path} has coordinates off the grid nodes")
    if len(nodes) and np.abs(nodes).max() > spec.n_ext:
        raise PreconditionError(f"{path} has nodes outside the extended box")

    grid = np.full(spec.shape, exterior)
    grid[spec.positions(nodes)] = values
    log_stage_timing(logger, "grid function rows", len(values), timeit.default_timer() - start_time, EXPECTED_SECONDS_PER_ROW)
    return GridFunction(spec, grid, exterior)


def read_indicator(path: Path) -> SetIndicator:
    """
    Load a cell set CSV: one row per cell centre, value 1 for cells in the set.

    Raises:
        FileNotFoundError: If the file does not exist.
        PreconditionError: If the header is missing or a centre is not a cell centre.
    """
    path = Path(path)
    logger.info(f"Attempting to load cell set from: {path}")
    if not path.is_file():
        logger.error(f"File not found: {path}")
        raise FileNotFoundError(f"Failed to load cell set: {path}")

    spec = _spec_from_header(_tagged_header(path, CELLS_TAG))
    centres, values = _read_table(path, spec.dim)
    position = (centres + spec.half_width) / spec.h - 0.5
    cells_index = np.rint(position).astype(np.int64)
    if np.any(np.abs(position - cells_index) > 1e-9) or np.any(cells_index < 0) or np.any(cells_index >= spec.n_cells):
        raise PreconditionError(f"{path} lists points that are not cell centres of the box")

    cells = np.zeros(spec.cell_shape, dtype=bool)
    cells[tuple(cells_index.T)] = values != 0
    indicator = SetIndicator(spec, cells)
    logger.info(f"Loaded {indicator.cell_count} cells on grid {spec.header()}")
    return indicator


def read_weights_cache(path: Path, spec: Optional[GridSpec] = None, sigma: Optional[float] = None) -> KernelWeights:
    """
    Load kernel weights written by write_weights_cache.

    Raises:
        FileNotFoundError: If the file does not exist.
        CacheError: On a format version, grid, sigma or checksum mismatch.
    """
    path = Path(path)
    if not path.is_file():
        logger.error(f"File not found: {path}")
        raise FileNotFoundError(f"Failed to load weights cache: {path}")

    header = {}
    for line in _comment_lines(path):
        if "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()

    if header.get("format_version") != CACHE_FORMAT_VERSION:
        raise CacheError(
            f"weights cache format {header.get('format_version')!r} is not {CACHE_FORMAT_VERSION!r}"
        )
    try:
        cached_spec = GridSpec(
            int(header["dim"]),
            int(header["n_cells"]),
            float(header["half_width"]),
            float(header["exterior_radius"]),
        )
        cached_sigma = float(header["sigma"])
        tail = np.array([float(t) for t in header["tail"].split()]).reshape(cached_spec.dim, cached_spec.dim)
    except (KeyError, ValueError) as e:
        raise CacheError(f"weights cache header is incomplete: {e}")

    if spec is not None and spec != cached_spec:
        raise CacheError(f"weights cache was built for {cached_spec.header()}, not {spec.header()}")
    if sigma is not None and float(sigma) != cached_sigma:
        raise CacheError(f"weights cache was built for sigma={cached_sigma!r}, not {sigma!r}")

    dim = cached_spec.dim
    table = np.loadtxt(path, comments="#", ndmin=2)
    if table.shape[1] != dim + dim * dim:
        raise CacheError(f"weights cache rows have {table.shape[1]} columns, expected {dim + dim * dim}")
    offsets = table[:, :dim].astype(np.int64)
    weights = table[:, dim:].reshape(-1, dim, dim)
    for array in (offsets, weights, tail):
        array.setflags(write=False)

    loaded = KernelWeights(
        cached_spec,
        cached_sigma,
        offsets,
        weights,
        tail,
        header.get("tail_dominant") == "True",
        header.get("moment_corrected") == "True",
    )
    if loaded.checksum() != header.get("checksum"):
        raise CacheError(f"weights cache checksum mismatch in {path}")
    logger.info(f"Loaded {len(offsets)} cached offsets for sigma={cached_sigma!r} from {path}")
    return loaded
