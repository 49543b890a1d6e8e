"""On-disk formats: demo directories, checkpoints, reports and CSV tables.

Every writer is deterministic: JSON keys are sorted and floats use Python's
round-trip repr, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .config import FORMAT_VERSION, ExperimentConfig
from .env import Demonstration, SceneConfig

MANIFEST = "manifest.json"
_HEADER = struct.Struct("<4q")  # H, W, D, T


class DataError(ValueError):
    """A file is missing, truncated or does not match its declared format."""


def write_json(path, obj, indent: int | None = 1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seps = (",", ":") if indent is None else (",", ": ")
    path.write_text(json.dumps(obj, sort_keys=True, indent=indent, separators=seps) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- demonstrations

def _episode_stem(i: int) -> str:
    return f"episode_{i:03d}"


def write_demos(out_dir, demos: list[Demonstration], config: ExperimentConfig) -> Path:
    """One ``.json`` (metadata, proprio, actions) and one ``.bin`` (tokens) per episode."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, d in enumerate(demos):
        stem = _episode_stem(i)
        t, h, w, dim = d.tokens.shape
        with open(out / f"{stem}.bin", "wb") as fh:
            fh.write(_HEADER.pack(h, w, dim, t))
            fh.write(np.ascontiguousarray(d.tokens, dtype="<f8").tobytes())
        write_json(out / f"{stem}.json", {
            "format_version": FORMAT_VERSION,
            "seed": d.seed,
            "scene": d.scene.to_dict(),
            "goal": list(d.goal),
            "final_agent": list(d.final_agent),
            "proprio": d.proprio.tolist(),
            "actions": d.actions.tolist(),
            "timesteps": d.timesteps.tolist(),
            "tokens_file": f"{stem}.bin",
        })
        names.append(stem)
    write_json(out / MANIFEST, {
        "format_version": FORMAT_VERSION,
        "master_seed": config.env.master_seed,
        "demo_seed": config.env.demo_seed,
        "n_episodes": len(demos),
        "episodes": names,
        "config": config.to_dict(),
    })
    return out


def _read_tokens(path: Path, steps: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    h, w, d, t = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * h * w * d * t
    if min(h, w, d, t) < 0 or len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for (H, W, D, T) = {(h, w, d, t)}, "
                        f"found {len(raw)}")
    if t != steps:
        raise DataError(f"{path}: header says {t} steps, metadata says {steps}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(t, h, w, d).astype(np.float64)


def read_demos(demo_dir) -> tuple[list[Demonstration], dict]:
    """Load a directory written by :func:`write_demos`; returns ``(demos, manifest)``."""
    root = Path(demo_dir)
    manifest = read_json(root / MANIFEST)
    demos = []
    for stem in manifest.get("episodes", []):
        meta_path = root / f"{stem}.json"
        meta = read_json(meta_path)
        try:
            steps = len(meta["timesteps"])
            tokens = _read_tokens(root / meta["tokens_file"], steps)
            demos.append(Demonstration(
                np.array(meta["proprio"], dtype=np.float64).reshape(-1, 2), tokens,
                np.array(meta["actions"], dtype=np.float64).reshape(-1, 2),
                np.array(meta["timesteps"], dtype=np.int64), int(meta["seed"]),
                SceneConfig.from_dict(meta["scene"]), tuple(meta["goal"]),
                tuple(meta["final_agent"])))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{meta_path}: malformed episode metadata ({exc})") from None
    if len(demos) != manifest.get("n_episodes"):
        raise DataError(f"{root / MANIFEST}: lists {manifest.get('n_episodes')} episodes, "
                        f"found {len(demos)}")
    return demos, manifest
