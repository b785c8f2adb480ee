"""On-disk formats: binary PGM images, labels.csv datasets, MTBR1 checkpoints."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .lexicon import DESCRIPTOR_CLASSES, DESCRIPTORS, TUMOR_CLASSES, DescriptorLabels, Sample
from .preprocess import preprocess_pair

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"MTBR1"
LABEL_COLUMNS = ("name", "tumor_class", "orientation", "shape", "margin", "echo", "posterior",
                 "indistinct", "angular", "microlobulated", "spiculated")


class DatasetError(ValueError):
    """Malformed dataset directory or labels.csv."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"labels.csv line {line}: {message}")
        self.line = line


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not match the expected config."""


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit)


def write_pgm(path: PathLike, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("PGM images must be 2-d")
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# labels.csv datasets


def write_labels(path: PathLike, rows: List[Dict[str, Optional[str]]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LABEL_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (row.get(k) or "") for k in LABEL_COLUMNS})


def labels_row(name: str, tumor: Optional[int], labels: DescriptorLabels) -> Dict[str, Optional[str]]:
    row: Dict[str, Optional[str]] = {"name": name, "tumor_class": None if tumor is None else TUMOR_CLASSES[tumor]}
    row.update(labels.as_dict())
    return row


def read_labels(path: PathLike) -> List[Tuple[str, Optional[int], DescriptorLabels]]:
    """Parse labels.csv; empty or missing descriptor cells mark the task unlabeled."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "name" not in reader.fieldnames:
            raise DatasetError("missing header with a 'name' column", line=1)
        unknown = set(reader.fieldnames) - set(LABEL_COLUMNS)
        if unknown:
            raise DatasetError(f"unknown columns {sorted(unknown)}", line=1)
        for row in reader:
            line = reader.line_num
            name = (row.get("name") or "").strip()
            if not name:
                raise DatasetError("empty sample name", line)
            tumor_raw = (row.get("tumor_class") or "").strip().lower()
            if tumor_raw and tumor_raw not in TUMOR_CLASSES:
                raise DatasetError(f"tumor_class {tumor_raw!r} is not one of {TUMOR_CLASSES}", line)
            tumor = TUMOR_CLASSES.index(tumor_raw) if tumor_raw else None
            values = {}
            for d in DESCRIPTORS:
                cell = (row.get(d) or "").strip()
                if cell and cell not in DESCRIPTOR_CLASSES[d]:
                    raise DatasetError(f"{d}={cell!r} is not one of {DESCRIPTOR_CLASSES[d]}", line)
                values[d] = cell or None
            try:
                labels = DescriptorLabels(**values)
            except ValueError as exc:
                raise DatasetError(str(exc), line) from exc
            out.append((name, tumor, labels))
    return out


def load_dataset(directory: PathLike, size: int = 64, crop: bool = True,
                 single_channel: bool = False) -> List[Sample]:
    """Read ``<name>.pgm`` / ``<name>_mask.pgm`` pairs listed in labels.csv and preprocess them."""
    directory = Path(directory)
    labels_path = directory / "labels.csv"
    if not labels_path.exists():
        raise DatasetError(f"{labels_path} not found")
    samples = []
    for name, tumor, labels in read_labels(labels_path):
        img_path, mask_path = directory / f"{name}.pgm", directory / f"{name}_mask.pgm"
        if not img_path.exists() or not mask_path.exists():
            raise DatasetError(f"missing image or mask file for sample {name!r}")
        image, mask = preprocess_pair(read_pgm(img_path), read_pgm(mask_path), size, crop, single_channel)
        samples.append(Sample(image, mask.astype(np.uint8), labels, tumor, name))
    return samples


# ---------------------------------------------------------------------------
# MTBR1 checkpoints
#
# layout: b"MTBR1" | u32 little-endian header length | UTF-8 JSON header |
#         tensors as row-major float64 little-endian, in header order


def save_checkpoint(path: PathLike, params: Dict[str, np.ndarray], config: dict, seed: int,
                    extra: Optional[dict] = None) -> None:
    header = {
        "config": config,
        "seed": seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict, int, dict]:
    """Returns (params, config dict, seed, extra)."""
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MTBR1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    try:
        header = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos += n
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = pos + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        pos = end
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return params, header["config"], header["seed"], header.get("extra", {})
