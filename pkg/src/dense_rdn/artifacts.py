"""On-disk trajectory format: raw little-endian float64 + JSON sidecar + CSV summary."""

from __future__ import annotations

import csv
import json
import platform
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from dense_rdn import __version__
from dense_rdn.analysis import sigma_dif_series, sigma_rxn_series
from dense_rdn.reactor import ReactorParams

TRAJECTORY_FORMAT = 1


def write_trajectory(directory, states: Sequence[np.ndarray], times, params: ReactorParams | None = None,
                     species: Sequence[str] | None = None, meta: Mapping[str, Any] | None = None) -> Path:
    """``states.bin`` holds a C-ordered [n_t, B, S, U, V] little-endian float64 array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.stack([np.asarray(s) for s in states]), dtype="<f8")
    (directory / "states.bin").write_bytes(arr.tobytes())
    sidecar = {
        "format": TRAJECTORY_FORMAT,
        "file": "states.bin",
        "dtype": "<f8",
        "order": "C",
        "shape": list(arr.shape),
        "axes": ["t", "batch", "species", "u", "v"],
        "times": [float(t) for t in times],
        "species": list(species) if species is not None else None,
        "code_version": __version__,
        **dict(meta or {}),
    }
    (directory / "trajectory.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    write_summary_csv(directory / "summary.csv", arr, times, params)
    return directory


def read_trajectory(directory) -> tuple[np.ndarray, dict[str, Any]]:
    directory = Path(directory)
    sidecar = json.loads((directory / "trajectory.json").read_text())
    raw = np.frombuffer((directory / sidecar["file"]).read_bytes(), dtype=sidecar["dtype"])
    return raw.reshape(sidecar["shape"]).astype(np.float64), sidecar


def write_summary_csv(path, states: np.ndarray, times, params: ReactorParams | None = None) -> Path:
    """Per time point: species means, total moles and (with params) mean entropy production rates."""
    n_species = states.shape[2]
    rxn = dif = None
    if params is not None:
        rxn = sigma_rxn_series(list(states), params)
        dif = sigma_dif_series(list(states), params)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["t"] + [f"mean_{i}" for i in range(n_species)] + ["total_moles"]
        if params is not None:
            head += ["sigma_rxn", "sigma_dif", "sigma_tot"]
        w.writerow(head)
        for j, t in enumerate(times):
            x = states[j]
            row = [repr(float(t))] + [repr(float(x[:, i].mean())) for i in range(n_species)] + [repr(float(x.sum()))]
            if params is not None:
                row += [repr(float(rxn[j])), repr(float(dif[j])), repr(float(rxn[j] + dif[j]))]
            w.writerow(row)
    return path


def run_info(seed: int | None = None, **extra: Any) -> dict[str, Any]:
    """Provenance block written next to every artifact directory."""
    from dense_rdn.config import SCHEMA_VERSION

    return {
        "code_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }


def write_json(path, data: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
