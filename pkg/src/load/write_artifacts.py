from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import pandas as pd

from src import __version__
from src.decomposition.cz_decomposition import CZResult
from src.experiments.estimate_experiments import EstimateReport
from src.extract.read_inputs import CACHE_FORMAT_VERSION, CELLS_TAG, GRID_TAG
from src.grid.grid_core import GridFunction, SetIndicator
from src.operators.kernel_weights import KernelWeights
from utils.file_utils import ensure_directory, setup_logger, sha256_text

logger = setup_logger(__name__)

# --- Constants ---

MANIFEST_FILE = "manifest.txt"
ROWS_FILE = "rows.csv"
FITS_FILE = "fits.csv"
# run-location parameters that do not change any result
UNCHECKSUMMED = ("out", "threads", "config")


def format_value(value: Any) -> str:
    """Config-file spelling of a parameter value."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def manifest_checksum(command: str, params: Mapping[str, Any]) -> str:
    """sha256 of the command and every result-relevant parameter, in sorted order."""
    lines = [f"command = {command}"]
    lines += [
        f"{key} = {format_value(value)}"
        for key, value in sorted(params.items())
        if key not in UNCHECKSUMMED and value is not None
    ]
    return sha256_text("\n".join(lines))


@dataclass
class RunManifest:
    """Everything needed to repeat a run; written even when the run fails."""

    command: str
    params: Dict[str, Any]
    wall_time: float = 0.0
    status: str = "pass"
    weights_checksum: Optional[str] = None
    error: Optional[str] = None
    verdicts: Dict[str, bool] = field(default_factory=dict)
    version: str = __version__

    @property
    def checksum(self) -> str:
        return manifest_checksum(self.command, self.params)

    def lines(self):
        meta = {
            "command": self.command,
            "version": self.version,
            "manifest_checksum": self.checksum,
            "weights_checksum": self.weights_checksum,
            "wall_time": f"{self.wall_time:.3f}",
            "status": self.status,
            "error": self.error,
        }
        out = [f"# {key} = {value}" for key, value in meta.items() if value is not None]
        out += [f"# verdict {key} = {'pass' if ok else 'fail'}" for key, ok in self.verdicts.items()]
        out += [
            f"{key} = {format_value(value)}"
            for key, value in self.params.items()
            if key != "config" and value is not None
        ]
        return out


#########################
#     WRITERS
#########################


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    path = ensure_directory(Path(out_dir)) / MANIFEST_FILE
    path.write_text("\n".join(manifest.lines()) + "\n", encoding="utf-8")
    logger.info(f"Manifest written to {path} (status {manifest.status})")
    return path


def write_table(frame: pd.DataFrame, path: Path, checksum: str, header: Optional[str] = None) -> Path:
    """CSV with a `# manifest_checksum=...` line, an optional `# ...` header line, then the table."""
    path = Path(path)
    ensure_directory(path.parent)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# manifest_checksum={checksum}\n")
        if header is not None:
            handle.write(f"# {header}\n")
        frame.to_csv(handle, index=False)
    logger.debug(f"Saved {len(frame)} rows to {path}")
    return path


def _coordinate_frame(points: np.ndarray, values: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame({f"x{d}": points[:, d] for d in range(points.shape[1])})
    frame["value"] = values
    return frame


def write_grid_function(u: GridFunction, path: Path, checksum: str) -> Path:
    """Every extended-box node with its value; the header carries the grid and exterior value."""
    spec = u.spec
    points = spec.node_coordinates().reshape(-1, spec.dim)
    frame = _coordinate_frame(points, u.values.reshape(-1))
    return write_table(frame, path, checksum, f"{GRID_TAG} {spec.header()} exterior={u.exterior!r}")


def write_indicator(ind: SetIndicator, path: Path, checksum: str) -> Path:
    spec = ind.spec
    centres = spec.cell_centers().reshape(-1, spec.dim)
    frame = _coordinate_frame(centres, ind.cells.reshape(-1).astype(int))
    return write_table(frame, path, checksum, f"{CELLS_TAG} {spec.header()}")


def write_report(report: EstimateReport, out_dir: Path, checksum: str) -> Dict[str, Path]:
    """rows.csv and fits.csv for an experiment report."""
    out_dir = ensure_directory(Path(out_dir))
    paths = {
        "rows": write_table(report.rows, out_dir / ROWS_FILE, checksum),
        "fits": write_table(report.fits, out_dir / FITS_FILE, checksum),
    }
    logger.info(f"{report.name}: {len(report.rows)} rows and {len(report.fits)} fits saved to {out_dir}")
    return paths


def cz_frame(result: CZResult) -> pd.DataFrame:
    """One row per kept cube and per predecessor, with exact densities as fractions."""
    records = []
    for role, cubes, counts in (
        ("kept", result.kept, result.kept_counts),
        ("predecessor", result.predecessors, [None] * len(result.predecessors)),
    ):
        for cube, count in zip(cubes, counts):
            record = {"role": role, "level": cube.level, "width": cube.width, "half_side": cube.half_side}
            record.update({f"origin{d}": o for d, o in enumerate(cube.origin)})
            record.update({f"c{d}": c for d, c in enumerate(cube.center)})
            record["e_cells"] = "" if count is None else count
            record["density"] = "" if count is None else str(cube.density(count))
            records.append(record)
    return pd.DataFrame(records)


def write_cz_result(result: CZResult, path: Path, checksum: str) -> Path:
    header = (
        f"cz alpha={result.alpha} e_cells={result.e_cells} "
        f"predecessor_cells={result.predecessor_cells} root_width={result.root.width}"
    )
    return write_table(cz_frame(result), path, checksum, header)


def write_weights_cache(w: KernelWeights, path: Path) -> Path:
    """`# key = value` header, then one line per offset: k, then W_k flattened, at repr precision."""
    path = Path(path)
    ensure_directory(path.parent)
    spec = w.spec
    header = {
        "format_version": CACHE_FORMAT_VERSION,
        "dim": spec.dim,
        "n_cells": spec.n_cells,
        "half_width": repr(spec.half_width),
        "exterior_radius": repr(spec.exterior_radius),
        "h": repr(spec.h),
        "sigma": repr(w.sigma),
        "tail": " ".join(repr(float(t)) for t in w.tail.reshape(-1)),
        "tail_dominant": w.tail_dominant,
        "moment_corrected": w.moment_corrected,
        "checksum": w.checksum(),
    }
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in header.items():
            handle.write(f"# {key} = {value}\n")
        for offset, matrix in zip(w.offsets, w.weights):
            ints = " ".join(str(int(k)) for k in offset)
            floats = " ".join(repr(float(v)) for v in matrix.reshape(-1))
            handle.write(f"{ints} {floats}\n")
    logger.info(f"Weights cache with {len(w.offsets)} offsets written to {path}")
    return path
