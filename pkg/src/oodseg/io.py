"""Dataset ingestion and artifact persistence.

Formats:
  manifest    JSON Lines, one record per sample:
              {"image": path, "label": path, "split": tag}
  label map   8-bit single-channel PNG; ids 254 (outlier) and 255 (ignore)
              are reserved
  score map   raw little-endian float32, row-major, plus a JSON sidecar
              {"width", "height", "dtype": "f32le", "kind"}
  class map   JSON object {class_name: {"id": int, "inlier": bool}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import IGNORE_ID, OUTLIER_ID

RESERVED_IDS = (OUTLIER_ID, IGNORE_ID)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    label: str
    split: str = ""


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path

    def __len__(self):
        return len(self.records)

    def resolve(self, rec: ManifestRecord) -> tuple[Path, Path]:
        return self.root / rec.image, self.root / rec.label


@dataclass
class ClassMap:
    entries: dict[int, dict]  # id -> {"name": str, "inlier": bool}

    def __post_init__(self):
        for cid in self.entries:
            if cid in RESERVED_IDS:
                raise ValueError(f"class id {cid} is reserved")

    @property
    def ids(self) -> set[int]:
        return set(self.entries)

    @classmethod
    def load(cls, path) -> "ClassMap":
        with open(path) as f:
            raw = json.load(f)
        entries = {}
        for name, entry in raw.items():
            cid = int(entry["id"])
            if cid in entries:
                raise ValueError(f"duplicate class id {cid}")
            entries[cid] = {"name": name, "inlier": bool(entry.get("inlier", True))}
        return cls(entries)


def load_manifest(path, root: Path | None = None) -> Manifest:
    """Parse a JSON Lines manifest; records sorted by image path, duplicates rejected."""
    path = Path(path)
    records = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({e.msg})")
            for key in ("image", "label"):
                if key not in obj:
                    raise ManifestError(f"{path}:{lineno}: missing {key!r} key")
            if obj["image"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate record {obj['image']!r}")
            seen.add(obj["image"])
            records.append(
                ManifestRecord(obj["image"], obj["label"], obj.get("split", ""))
            )
    records.sort(key=lambda r: r.image)
    return Manifest(records=records, root=root or path.parent)


def read_image(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"))
    return img


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(image.astype(np.uint8), mode="RGB").save(path)


def read_label_map(path, classmap: ClassMap | None = None) -> np.ndarray:
    """Read an 8-bit single-channel label PNG, validating ids when a map is given."""
    pil = Image.open(path)
    if pil.mode != "L":
        raise ValueError(f"{path}: expected 8-bit single-channel PNG, got mode {pil.mode}")
    labels = np.asarray(pil)
    if classmap is not None:
        allowed = classmap.ids | set(RESERVED_IDS)
        bad = ~np.isin(labels, list(allowed))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValueError(
                f"{path}: unknown class id {int(labels[r, c])} at pixel ({r}, {c})"
            )
    return labels


def write_label_map(path, labels: np.ndarray) -> None:
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got {labels.shape}")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def write_score_map(path, scores: np.ndarray, kind: str = "") -> None:
    """Persist a score map as raw f32le plus a JSON sidecar."""
    scores = np.asarray(scores, dtype=np.float32)
    if scores.ndim != 2:
        raise ValueError(f"score map must be 2-D, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("score map contains non-finite values")
    path = Path(path)
    h, w = scores.shape
    path.write_bytes(scores.astype("<f4").tobytes(order="C"))
    sidecar = {"width": w, "height": h, "dtype": "f32le", "kind": kind}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n"
    )


def read_score_map(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = path.read_bytes()
    w, h = sidecar["width"], sidecar["height"]
    expected = w * h * 4
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload is {len(raw)} bytes, sidecar implies {expected}"
        )
    scores = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    return scores, sidecar


def write_score_png(path, scores: np.ndarray) -> None:
    """Min-max normalized grayscale PNG export of a score map."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi > lo:
        norm = (s - lo) / (hi - lo)
    else:
        norm = np.zeros_like(s)
    Image.fromarray(np.floor(norm * 255 + 0.5).astype(np.uint8), mode="L").save(path)
