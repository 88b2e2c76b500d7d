"""Walk an image folder tree (one subfolder per class), run the backbone,
and write the feature maps into the primary container format.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from idp.containers import (
    FeatureDataset,
    FeatureMap,
    FeatureShape,
    LabelSpace,
    write_container,
)

from .backbones import build

# Fixed preprocessing constants, recorded in the manifest sidecar.
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class ShapeMismatch(RuntimeError):
    """Backbone produced a different grid than the first batch."""


@dataclass
class ExportManifest:
    input_root: str
    classes: list[str]
    backbone: str
    resolution: int
    output: str
    role: str = "target"
    weights: str | None = None
    norm_mean: tuple = NORM_MEAN
    norm_std: tuple = NORM_STD

    def sidecar_path(self) -> Path:
        return Path(self.output).with_suffix(".manifest.json")


def manifest_for(
    input_root: str,
    output: str,
    backbone: str = "tiny",
    resolution: int = 160,
    role: str = "target",
    weights: str | None = None,
) -> ExportManifest:
    root = Path(input_root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class subfolders under {input_root}")
    return ExportManifest(str(root), classes, backbone, resolution, output, role, weights)


def _load_image(path: Path, resolution: int) -> np.ndarray | None:
    """Deterministic preprocessing: resize short side, center crop, scale
    to [0,1], channel-normalize.  Returns None for unreadable files."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            w, h = img.size
            scale = resolution / min(w, h)
            img = img.resize(
                (max(resolution, round(w * scale)), max(resolution, round(h * scale))),
                Image.BILINEAR,
            )
            w, h = img.size
            left = (w - resolution) // 2
            top = (h - resolution) // 2
            img = img.crop((left, top, left + resolution, top + resolution))
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError):
        return None
    arr = (arr - np.asarray(NORM_MEAN, np.float32)) / np.asarray(NORM_STD, np.float32)
    return arr.transpose(2, 0, 1)  # C, H, W


def export(manifest: ExportManifest, batch_size: int = 16) -> FeatureDataset:
    """Run the backbone over every readable image and write the container.

    Unreadable images are skipped with a warning; a backbone output whose
    grid deviates from the first batch is fatal.  The manifest (including
    the grid actually produced) is echoed as a JSON sidecar.
    """
    net = build(manifest.backbone, manifest.weights)
    root = Path(manifest.input_root)
    images: list[tuple[int, Path]] = []
    for label, cls in enumerate(manifest.classes):
        entries = sorted(
            p for p in (root / cls).iterdir()
            if p.suffix.lower() in IMAGE_SUFFIXES
        )
        images.extend((label, p) for p in entries)

    records: list[FeatureMap] = []
    shape: FeatureShape | None = None
    sample_id = 0
    torch.set_num_threads(1)
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            tensors, labels = [], []
            for label, path in chunk:
                arr = _load_image(path, manifest.resolution)
                if arr is None:
                    print(f"warning: skipping unreadable image {path}", file=sys.stderr)
                    continue
                tensors.append(torch.from_numpy(arr))
                labels.append(label)
            if not tensors:
                continue
            out = net(torch.stack(tensors)).numpy().astype(np.float64)
            b, d, gh, gw = out.shape
            if shape is None:
                shape = FeatureShape(gw, gh, d)
            elif (gw, gh, d) != (shape.width, shape.height, shape.channels):
                raise ShapeMismatch(
                    f"backbone grid changed from {shape} to ({gw}x{gh}x{d})"
                )
            # (B, D, H, W) -> position-major rows: index(h, w) = h*W + w
            rows = out.transpose(0, 2, 3, 1).reshape(b, gh * gw, d)
            for i, label in enumerate(labels):
                records.append(FeatureMap(sample_id, label, rows[i]))
                sample_id += 1
    if shape is None:
        raise FileNotFoundError(f"no readable images under {manifest.input_root}")
    dataset = FeatureDataset(
        shape, LabelSpace(tuple(manifest.classes), manifest.role), records
    )
    write_container(dataset, manifest.output)
    sidecar = dict(asdict(manifest), grid={"width": shape.width,
                                           "height": shape.height,
                                           "channels": shape.channels})
    manifest.sidecar_path().write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return dataset
