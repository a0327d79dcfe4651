"""Scene directories: ``images/`` plus one camera line per frame.

``cameras.txt`` lines read ``frame_id fx fy cx cy`` followed by the twelve
row-major entries of the world-to-camera ``[R | t]`` matrix. Lines starting
with ``#`` are comments. Optional extras: ``meta.json`` (near/far bounds)
and ``scene.json`` + ``points.bin`` (synthetic geometry for oracles).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import SceneFormatError
from .geometry import Intrinsics, Pose
from .imaging import read_png, write_png

CAMERAS = "cameras.txt"
IMAGES = "images"


@dataclass
class Frame:
    frame_id: int
    k: Intrinsics
    pose: Pose  # world -> camera


@dataclass
class SceneDir:
    root: Path
    frames: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def image_path(self, index: int) -> Path:
        return image_path(self.root, self.frames[index].frame_id)

    def has_image(self, index: int) -> bool:
        return self.image_path(index).exists()

    def intrinsics(self, index: int, size: int | None = None, reference: int = 0) -> Intrinsics:
        """Intrinsics of frame ``index`` rescaled to ``size``.

        The native width is read from the header of frame ``reference``'s
        image, so the frame itself never has to be opened.
        """
        k = self.frames[index].k
        if size is None:
            return k
        with PILImage.open(self.image_path(reference)) as im:
            w, _ = im.size
        return k if w == size else k.scaled(size / w)

    def load_image(self, index: int, size: int | None = None):
        """Image of frame ``index`` and its intrinsics, resized to ``size`` if given."""
        path = self.image_path(index)
        if not path.exists():
            raise SceneFormatError(f"missing image {path}")
        k = self.frames[index].k
        if size is None:
            return read_png(path), k
        with PILImage.open(path) as im:
            w, h = im.size
            if (w, h) != (size, size):
                if w != h:
                    raise SceneFormatError(f"{path}: only square images can be resized")
                im = im.convert("RGB").resize((size, size), PILImage.BILINEAR)
                return np.asarray(im, dtype=np.float64) / 255.0, k.scaled(size / w)
        return read_png(path), k


def image_path(root, frame_id: int) -> Path:
    return Path(root) / IMAGES / f"{frame_id:06d}.png"


def format_camera_line(frame_id: int, k: Intrinsics, pose: Pose) -> str:
    vals = [k.fx, k.fy, k.cx, k.cy] + list(pose.matrix[:3, :].ravel())
    return " ".join([str(int(frame_id))] + [repr(float(v)) for v in vals])


def write_cameras(root, frames) -> None:
    lines = [format_camera_line(f.frame_id, f.k, f.pose) for f in frames]
    (Path(root) / CAMERAS).write_text("\n".join(lines) + "\n")


def read_scene_dir(root) -> SceneDir:
    root = Path(root)
    cam_file = root / CAMERAS
    if not cam_file.exists():
        raise SceneFormatError(f"missing camera file {cam_file}")
    frames = []
    for lineno, line in enumerate(cam_file.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 17:
            raise SceneFormatError(f"{cam_file}:{lineno}: expected 17 fields, got {len(parts)}")
        try:
            fid = int(parts[0])
            vals = [float(p) for p in parts[1:]]
            k = Intrinsics(*vals[:4])
        except ValueError as exc:
            raise SceneFormatError(f"{cam_file}:{lineno}: {exc}") from exc
        m = np.eye(4)
        m[:3, :] = np.reshape(vals[4:], (3, 4))
        frames.append(Frame(fid, k, Pose.from_matrix(m)))
    if not frames:
        raise SceneFormatError(f"{cam_file}: no camera lines")
    ids = [f.frame_id for f in frames]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise SceneFormatError(f"{cam_file}: frame ids must be unique and increasing")
    meta_file = root / "meta.json"
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    return SceneDir(root, frames, meta)


def write_scene_dir(root, frames, images, meta: dict | None = None) -> SceneDir:
    root = Path(root)
    (root / IMAGES).mkdir(parents=True, exist_ok=True)
    for f, img in zip(frames, images):
        write_png(image_path(root, f.frame_id), img)
    write_cameras(root, frames)
    if meta:
        (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return SceneDir(root, list(frames), meta or {})
