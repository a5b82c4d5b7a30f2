"""Versioned model files: one ``.npz`` archive with a JSON header."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import CorruptModelError, MissingFileError, ModelVersionError
from .model import Layer, ModelState

FORMAT = "diad-model"
FORMAT_VERSION = 1

_LAYER_FIELDS = ("logits", "thresholds", "log_slopes", "leaf_weights", "column_mask")
_BASELINE_FIELDS = ("reference", "observed_min", "observed_max")


def save_model(model: ModelState, path: str | Path) -> Path:
    """Write ``model`` to ``path`` (an ``.npz`` suffix is not added)."""
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "n_features": model.n_features,
        "depth": model.depth,
        "n_layers": model.n_layers,
        "temperature": model.temperature,
        "min_temperature": model.min_temperature,
        "step": model.step,
        "bias": model.bias,
        "config": model.config,
        "has_baseline": model.baseline is not None,
    }
    arrays = {"header": np.array(json.dumps(header)), "feature_min": model.feature_min, "feature_max": model.feature_max}
    for i, layer in enumerate(model.layers):
        for name in _LAYER_FIELDS:
            arrays[f"layer{i}/{name}"] = getattr(layer, name)
    if model.baseline is not None:
        for name in _BASELINE_FIELDS:
            arrays[f"baseline/{name}"] = np.asarray(model.baseline[name])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_model(path: str | Path) -> ModelState:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"no such model file: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        header = json.loads(str(arrays["header"]))
    except (zipfile.BadZipFile, OSError, EOFError, KeyError, ValueError) as exc:
        raise CorruptModelError(f"{path}: unreadable model file ({exc})") from exc
    if header.get("format") != FORMAT:
        raise CorruptModelError(f"{path}: not a model file")
    if header.get("version") != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {header.get('version')}, expected {FORMAT_VERSION}")
    try:
        layers = [
            Layer(*(arrays[f"layer{i}/{name}"] for name in _LAYER_FIELDS)) for i in range(header["n_layers"])
        ]
        baseline = None
        if header["has_baseline"]:
            baseline = {name: arrays[f"baseline/{name}"] for name in _BASELINE_FIELDS}
        return ModelState(
            n_features=int(header["n_features"]),
            depth=int(header["depth"]),
            layers=layers,
            feature_min=arrays["feature_min"],
            feature_max=arrays["feature_max"],
            temperature=float(header["temperature"]),
            min_temperature=float(header["min_temperature"]),
            step=int(header["step"]),
            bias=float(header["bias"]),
            config=dict(header["config"]),
            baseline=baseline,
        )
    except KeyError as exc:
        raise CorruptModelError(f"{path}: missing entry {exc}") from exc
