"""Feature-map export into the engine's manifest format.

Images are resized so the longer side hits longer_side * scale (aspect
preserved), pushed through the backbone once per scale, and the tap
activations land as float32 AGTF files next to a feature_maps manifest.
Attention-mode exports carry all four taps, plain-pooling exports only the
final one. The manifest is written last so a crashed export never leaves a
readable manifest pointing at missing tensors.
"""

from __future__ import annotations

import json
import os
import re
import tempfile

import numpy as np
import torch
from PIL import Image

from .agtf import write_tensor

AGEM_TAPS = ("B4_23", "B5_1", "B5_2", "B5_3")
PLAIN_TAPS = ("B5_3",)

# standard normalization for torchvision ImageNet backbones
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_ID_OK = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def load_image(source) -> Image.Image:
    """Path, PIL image, or HWC uint8 array to an RGB PIL image."""
    if isinstance(source, Image.Image):
        return source.convert("RGB")
    if isinstance(source, np.ndarray):
        if source.ndim != 3 or source.shape[2] != 3 or source.dtype != np.uint8:
            raise ValueError(f"array image must be HWC uint8, got "
                             f"{source.shape} {source.dtype}")
        return Image.fromarray(source, mode="RGB")
    return Image.open(source).convert("RGB")


def resize_longer_side(img: Image.Image, target: int) -> Image.Image:
    w, h = img.size
    ratio = target / max(w, h)
    return img.resize((max(1, round(w * ratio)), max(1, round(h * ratio))),
                      Image.BILINEAR)


def to_batch(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def _atomic_json(path, obj) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-manifest-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_feature_maps(images, backbone, scales, longer_side, output_dir,
                        mode: str = "agem", crop_boxes: dict | None = None,
                        manifest_name: str = "maps.json",
                        backbone_id: str = "resnet101") -> dict:
    """Export (image_id, source) pairs and return the written manifest.

    crop_boxes maps image ids to (x0, y0, x1, y1) pixel boxes applied
    before any resizing, the usual treatment for benchmark query regions.
    """
    if mode not in ("agem", "plain"):
        raise ValueError(f"mode must be 'agem' or 'plain', got {mode!r}")
    scales = [float(s) for s in scales]
    if not scales or any(s <= 0 or s > 1 for s in scales):
        raise ValueError(f"scales must lie in (0, 1], got {scales}")
    if int(longer_side) < 32:
        raise ValueError(f"longer_side {longer_side} is too small for the "
                         "backbone's downsampling")
    taps_wanted = AGEM_TAPS if mode == "agem" else PLAIN_TAPS
    os.makedirs(output_dir, exist_ok=True)

    entries = []
    seen = set()
    for image_id, source in images:
        image_id = str(image_id)
        if not _ID_OK.match(image_id):
            raise ValueError(f"image id {image_id!r} is not filename-safe")
        if image_id in seen:
            raise ValueError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        try:
            img = load_image(source)
        except (OSError, ValueError) as exc:
            raise type(exc)(f"image {image_id!r}: {exc}") from exc
        if crop_boxes and image_id in crop_boxes:
            x0, y0, x1, y1 = crop_boxes[image_id]
            if not (0 <= x0 < x1 <= img.size[0] and 0 <= y0 < y1 <= img.size[1]):
                raise ValueError(f"image {image_id!r}: crop box "
                                 f"{(x0, y0, x1, y1)} outside {img.size}")
            img = img.crop((x0, y0, x1, y1))
        scale_entries = []
        for k, scale in enumerate(scales):
            side = max(1, round(longer_side * scale))
            batch = to_batch(resize_longer_side(img, side))
            acts = backbone.activations(batch)
            missing = [t for t in taps_wanted if t not in acts]
            if missing:
                raise ValueError(f"backbone produced no activations for "
                                 f"{missing}")
            taps = {}
            for tap in taps_wanted:
                rel = f"{image_id}_s{k}_{tap}.agtf"
                write_tensor(os.path.join(output_dir, rel), acts[tap])
                taps[tap] = rel
            scale_entries.append({"scale": scale, "taps": taps})
        entries.append({"id": image_id, "scales": scale_entries})

    manifest = {"kind": "feature_maps", "backbone": backbone_id,
                "longer_side": int(longer_side), "mode": mode,
                "images": entries}
    _atomic_json(os.path.join(output_dir, manifest_name), manifest)
    return manifest


def subset_manifest(manifest: dict, image_ids, output_dir,
                    manifest_name: str) -> dict:
    """A second manifest over a subset of already exported images.

    Tensor files are shared with the parent export, so the subset manifest
    must land in the same directory.
    """
    wanted = set(image_ids)
    have = {e["id"] for e in manifest["images"]}
    missing = sorted(wanted - have)
    if missing:
        raise ValueError(f"ids not in the export: {missing}")
    sub = dict(manifest)
    sub["images"] = [e for e in manifest["images"] if e["id"] in wanted]
    _atomic_json(os.path.join(output_dir, manifest_name), sub)
    return sub
