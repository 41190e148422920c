"""Hermetic stand-in backbone: content-hashed pseudo-features.

Every value is a pure function of the sampled frame pixels and the prompt
text, so exports are bit-reproducible without any model weights. Useful
for pipeline plumbing, format tests, and dry runs.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ExportError


def _rng_from(*parts: bytes) -> np.random.Generator:
    digest = hashlib.sha256(b"\x1f".join(parts)).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def tokenize(prompt: str) -> list[str]:
    """Whitespace tokens; position 0 of the feature axis is the sentence slot."""
    words = prompt.split()
    if not words:
        raise ExportError("prompt must contain at least one token")
    return words


class StubBackbone:
    """Deterministic (T,H,W,C) and (T,L,C) features from content hashes."""

    name = "stub"
    video_frame_multiple = 1  # source frames consumed per output frame

    def __init__(self, height: int = 4, width: int = 4, channels: int = 16):
        if min(height, width, channels) < 1:
            raise ExportError("stub feature dimensions must be >= 1")
        self.height = height
        self.width = width
        self.channels = channels

    def video_features(self, frames: np.ndarray) -> np.ndarray:
        grids = [
            _rng_from(b"vst", frame.tobytes()).standard_normal(
                (self.height, self.width, self.channels)
            )
            for frame in frames
        ]
        return np.stack(grids).astype(np.float32)

    def token_features(self, frames: np.ndarray, prompt: str) -> np.ndarray:
        words = tokenize(prompt)
        sentence = prompt.encode()
        rows_per_frame = []
        for frame in frames:
            fkey = hashlib.sha256(frame.tobytes()).digest()
            rows = [
                _rng_from(b"sent", fkey, sentence).standard_normal(self.channels)
            ]
            for pos, word in enumerate(words, start=1):
                rows.append(
                    _rng_from(
                        b"word", fkey, word.encode(), str(pos).encode()
                    ).standard_normal(self.channels)
                )
            rows_per_frame.append(np.stack(rows))
        return np.stack(rows_per_frame).astype(np.float32)
