"""JSON file formats shared by the CLI subcommands.

Every file is plain JSON written with sorted keys so identical inputs give
byte-identical files.  Formats are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

from .agpl import PeakCue
from .evaluation import Prediction
from .masks import MaskSet
from .synth import ProposalInfo, Scene, proposals_from_dict

SCENE_FILE = "scene.json"
PROPOSALS_FILE = "proposals.json"
PEAKS_FILE = "peaks.json"
MANIFEST_FILE = "manifest.json"


class SchemaError(ValueError):
    """A file parsed or validated badly; the message names the file and location."""


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_json(path: Path, obj: Any) -> str:
    text = dumps(obj)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_json(path: Path) -> Any:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line.strip()}") from None


def _items(path: Path, data: Any, what: str) -> list:
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a JSON list of {what}, got {type(data).__name__}")
    return data


def _parse(path: Path, where: str, fn, item):
    try:
        return fn(item)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: {where}: {exc!r}") from None


def load_scene(path: Path) -> Scene:
    data = read_json(path)
    return _parse(path, "scene", Scene.from_dict, data)


def load_proposals(path: Path) -> tuple[MaskSet, list[ProposalInfo]]:
    data = read_json(path)
    return _parse(path, "proposals", proposals_from_dict, data)


def load_peaks(path: Path) -> list[PeakCue]:
    data = _items(path, read_json(path), "peaks")
    return [_parse(path, f"peak {i}", PeakCue.from_dict, d) for i, d in enumerate(data)]


def load_predictions(path: Path) -> list[Prediction]:
    data = _items(path, read_json(path), "predictions")
    return [_parse(path, f"prediction {i}", Prediction.from_dict, d) for i, d in enumerate(data)]


def load_dataset(directory: Path) -> tuple[Scene, MaskSet, list[ProposalInfo], list[PeakCue]]:
    directory = Path(directory)
    scene = load_scene(directory / SCENE_FILE)
    proposals, info = load_proposals(directory / PROPOSALS_FILE)
    peaks = load_peaks(directory / PEAKS_FILE)
    if proposals.canvas != scene.canvas:
        raise SchemaError(f"{directory}: proposals canvas {proposals.canvas} != scene canvas {scene.canvas}")
    for i, p in enumerate(peaks):
        if not (0 <= p.pixel[0] < scene.height and 0 <= p.pixel[1] < scene.width):
            raise SchemaError(f"{directory / PEAKS_FILE}: peak {i} at {p.pixel} lies outside the canvas")
        if p.category > scene.num_categories:
            raise SchemaError(f"{directory / PEAKS_FILE}: peak {i} has unknown category {p.category}")
    return scene, proposals, info, peaks
