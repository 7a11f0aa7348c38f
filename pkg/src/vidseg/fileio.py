"""Versioned binary containers and run-length mask coding.

Every file starts with a 4-byte magic, u16 major/minor version, and a u64
header length, followed by a UTF-8 JSON header and a raw payload. Readers
reject unknown magics and major versions; malformed files raise
FileFormatError carrying the byte offset of the problem.

RLE: flat row-major binary mask as alternating run lengths, background
first, 32-bit little-endian unsigned counts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .scene import SceneConfig, SyntheticVideo

DATASET_MAGIC = b"VSDS"
PREDICTION_MAGIC = b"VSPR"
CHECKPOINT_MAGIC = b"VSCK"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0

_HEAD = struct.Struct("<4sHHQ")


class FileFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


def rle_encode(mask: np.ndarray) -> np.ndarray:
    """Alternating run lengths over the flattened mask, background first."""
    flat = np.asarray(mask).reshape(-1).astype(bool)
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:  # first pixel is foreground: prepend an empty background run
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, size: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != size:
        raise ValueError(f"run lengths sum to {runs.sum()}, expected {size}")
    out = np.zeros(size, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            out[pos : pos + run] = True
        pos += int(run)
        value = not value
    return out


def write_container(path, magic: bytes, header: dict, payload: bytes) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEAD.pack(magic, FORMAT_MAJOR, FORMAT_MINOR, len(blob)))
        f.write(blob)
        f.write(payload)


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise FileFormatError(path, 0, "truncated header")
    got_magic, major, minor, header_len = _HEAD.unpack_from(raw, 0)
    if got_magic != magic:
        raise FileFormatError(path, 0, f"bad magic {got_magic!r}, expected {magic!r}")
    if major != FORMAT_MAJOR:
        raise FileFormatError(path, 4, f"unsupported major version {major}")
    start = _HEAD.size
    end = start + header_len
    if end > len(raw):
        raise FileFormatError(path, start, "header extends past end of file")
    try:
        header = json.loads(raw[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        pos = getattr(e, "pos", 0)
        raise FileFormatError(path, start + int(pos), f"invalid header JSON: {e}") from e
    return header, raw[end:]


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Dataset files (one video per file)


def write_video(path, video: SyntheticVideo) -> None:
    payload = bytearray()
    index: dict[str, dict[str, list[int]]] = {}
    for obj in range(video.object_count):
        per_frame = {}
        for t in range(video.frames):
            runs = rle_encode(video.masks[obj, t])
            per_frame[str(t)] = [len(payload), len(runs)]
            payload.extend(runs.astype("<u4").tobytes())
        index[str(obj)] = per_frame
    header = {
        "kind": "dataset",
        "config": dataclasses.asdict(video.config),
        "classes": list(map(int, video.classes)),
        "events": video.events,
        "hazard_pairs": [list(p) for p in video.hazard_pairs],
        "embeddings": video.embeddings.tolist(),
        "solo_areas": video.solo_areas.tolist(),
        "visibility": [video.visibility_intervals(i) for i in range(video.object_count)],
        "masks": index,
    }
    write_container(path, DATASET_MAGIC, header, bytes(payload))


def read_video(path) -> SyntheticVideo:
    header, payload = read_container(path, DATASET_MAGIC)
    try:
        cfg_dict = dict(header["config"])
        for key in ("canvas", "motion"):
            cfg_dict[key] = tuple(cfg_dict[key])
        config = SceneConfig(**cfg_dict)
        classes = [int(c) for c in header["classes"]]
        embeddings = np.asarray(header["embeddings"], dtype=np.float64)
        solo = np.asarray(header["solo_areas"], dtype=np.int64)
        index = header["masks"]
    except (KeyError, TypeError) as e:
        raise FileFormatError(path, _HEAD.size, f"missing dataset field: {e}") from e
    h, w = config.canvas
    count = len(classes)
    masks = np.zeros((count, config.frames, h, w), dtype=np.uint8)
    for obj in range(count):
        for t in range(config.frames):
            offset, n_runs = index[str(obj)][str(t)]
            runs = np.frombuffer(payload, dtype="<u4", count=n_runs, offset=offset)
            masks[obj, t] = rle_decode(runs, h * w).reshape(h, w)
    return SyntheticVideo(
        config,
        masks,
        solo,
        classes,
        embeddings,
        header["events"],
        [tuple(p) for p in header["hazard_pairs"]],
    )


# ---------------------------------------------------------------------------
# Prediction files


def write_prediction(path, tubes: list[dict], frames: int, canvas, meta: dict | None = None) -> None:
    """tubes: [{"id", "class", "score", "masks": (t, h, w) bool array}]."""
    payload = bytearray()
    entries = []
    for tube in tubes:
        per_frame = []
        for t in range(frames):
            runs = rle_encode(tube["masks"][t])
            per_frame.append([len(payload), len(runs)])
            payload.extend(runs.astype("<u4").tobytes())
        entries.append(
            {
                "id": int(tube["id"]),
                "class": int(tube["class"]),
                "score": float(tube["score"]),
                "masks": per_frame,
            }
        )
    header = {
        "kind": "prediction",
        "frames": frames,
        "canvas": list(canvas),
        "tubes": entries,
        "meta": meta or {},
    }
    write_container(path, PREDICTION_MAGIC, header, bytes(payload))


def read_prediction(path) -> tuple[list[dict], dict]:
    header, payload = read_container(path, PREDICTION_MAGIC)
    try:
        frames = int(header["frames"])
        h, w = header["canvas"]
        tubes = []
        for entry in header["tubes"]:
            masks = np.zeros((frames, h, w), dtype=bool)
            for t, (offset, n_runs) in enumerate(entry["masks"]):
                runs = np.frombuffer(payload, dtype="<u4", count=n_runs, offset=offset)
                masks[t] = rle_decode(runs, h * w).reshape(h, w)
            tubes.append(
                {
                    "id": int(entry["id"]),
                    "class": int(entry["class"]),
                    "score": float(entry["score"]),
                    "masks": masks,
                }
            )
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(path, _HEAD.size, f"invalid prediction file: {e}") from e
    return tubes, header.get("meta", {})
