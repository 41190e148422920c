"""Frame decoding and the uniform sampling policy."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ExportError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def uniform_frame_indices(n_source: int, t: int) -> list[int]:
    """Centers of t equal-width bins over [0, n_source)."""
    if n_source < 1:
        raise ExportError("no frames to sample from")
    if t < 1:
        raise ExportError(f"frame count must be >= 1, got {t}")
    centers = (np.arange(t) + 0.5) * n_source / t
    return [int(i) for i in np.clip(centers.astype(int), 0, n_source - 1)]


def _check_stack(frames: np.ndarray, origin) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ExportError(
            f"{origin}: expected frames shaped (F, H, W, 3), got {frames.shape}"
        )
    if frames.shape[0] < 1:
        raise ExportError(f"{origin}: decoded zero frames")
    if frames.dtype != np.uint8:
        raise ExportError(f"{origin}: expected uint8 pixels, got {frames.dtype}")
    return frames


def _decode_image_dir(path: Path) -> np.ndarray:
    from PIL import Image

    files = sorted(
        p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not files:
        raise ExportError(f"{path}: no image frames found")
    frames = []
    first_size = None
    for f in files:
        with Image.open(f) as img:
            rgb = np.asarray(img.convert("RGB"))
        if first_size is None:
            first_size = rgb.shape
        elif rgb.shape != first_size:
            raise ExportError(
                f"{f}: frame shape {rgb.shape} differs from {first_size}"
            )
        frames.append(rgb)
    return _check_stack(np.stack(frames), path)


def _decode_video_file(path: Path) -> np.ndarray:
    try:
        import cv2
    except ImportError as exc:
        raise ExportError(
            f"{path}: decoding video containers needs opencv "
            "(install the 'backbones' extra)"
        ) from exc
    cap = cv2.VideoCapture(str(path))
    frames = []
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            frames.append(bgr[..., ::-1].copy())
    finally:
        cap.release()
    if not frames:
        raise ExportError(f"{path}: decoder produced no frames")
    return _check_stack(np.stack(frames), path)


def decode_frames(path) -> np.ndarray:
    """Load a video as a uint8 (F, H, W, 3) stack.

    Accepts a .npy frame stack, a directory of image frames (sorted by
    name), or a video container (requires opencv).
    """
    path = Path(path)
    if not path.exists():
        raise ExportError(f"video not found: {path}")
    if path.is_dir():
        return _decode_image_dir(path)
    if path.suffix.lower() == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise ExportError(f"{path}: not a loadable frame stack ({exc})") from exc
        return _check_stack(arr, path)
    return _decode_video_file(path)
