"""One export job: decode, sample, featurize, write tensors + manifest stub.

The output bundle speaks the consumer's file contracts only: EDUT tensor
files plus a JSONL manifest whose records carry placeholder labels (3.0,
the scale midpoint) until a subjective study supplies real ones.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import make_provider
from .edut import encode_tensor, write_bytes_atomic
from .errors import ExportError
from .frames import decode_frames, uniform_frame_indices
from .stub import tokenize

# Mirrors the manifest schema's controlled vocabularies.
GENERATOR_MODELS = (
    "CogVideo", "Dreamina", "Gen-3", "Hotshot-XL", "Kling",
    "LaVie", "LVDM", "Show-1", "Text2Video-Zero", "VideoCrafter",
)
CATEGORIES = ("Numbers", "Geometry", "Measurement", "Probability")
PLACEHOLDER_SCORE = 3.0


@dataclass(frozen=True)
class ExportJob:
    """Everything needed to export one video."""

    video_path: Path
    prompt: str
    out_dir: Path
    video_id: str
    generator_model: str
    category: str
    t_frames: int = 4
    backbone: str = "stub"
    stub_height: int = 4
    stub_width: int = 4
    stub_channels: int = 16
    weights_vst: Path | None = None
    weights_blip: Path | None = None

    def __post_init__(self):
        if not self.video_id or "/" in self.video_id:
            raise ExportError(f"unusable video_id {self.video_id!r}")
        if self.generator_model not in GENERATOR_MODELS:
            raise ExportError(
                f"generator_model {self.generator_model!r} not in "
                f"{GENERATOR_MODELS}"
            )
        if self.category not in CATEGORIES:
            raise ExportError(f"category {self.category!r} not in {CATEGORIES}")
        if self.t_frames < 1:
            raise ExportError("t_frames must be >= 1")
        tokenize(self.prompt)  # validates non-empty


@dataclass(frozen=True)
class ExportResult:
    f_vst_path: Path
    f_blip_path: Path
    manifest_path: Path
    record: dict = field(repr=False)


def _stub_record(job: ExportJob, token_count: int) -> dict:
    word_count = token_count - 1
    return {
        "video_id": job.video_id,
        "prompt": job.prompt,
        "token_count": token_count,
        "generator_model": job.generator_model,
        "category": job.category,
        "f_vst_path": f"features/{job.video_id}_vst.edut",
        "f_blip_path": f"features/{job.video_id}_blip.edut",
        "labels": {
            "q_spatial": PLACEHOLDER_SCORE,
            "q_temporal": PLACEHOLDER_SCORE,
            "q_overall_percept": PLACEHOLDER_SCORE,
            "q_word": [PLACEHOLDER_SCORE] * word_count,
            "q_sentence": PLACEHOLDER_SCORE,
        },
        "token_mask": [True] * word_count,
    }


def _merge_manifest(path: Path, record: dict) -> None:
    """Insert or replace this video's line, atomically, preserving order."""
    lines: list[dict] = []
    if path.is_file():
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                lines.append(json.loads(raw))
            except json.JSONDecodeError as exc:
                raise ExportError(f"{path}:{lineno}: corrupt manifest ({exc})") from exc
    replaced = False
    for i, existing in enumerate(lines):
        if existing.get("video_id") == record["video_id"]:
            lines[i] = record
            replaced = True
            break
    if not replaced:
        lines.append(record)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_text("".join(json.dumps(line) + "\n" for line in lines))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def export(job: ExportJob) -> ExportResult:
    """Run one job end to end; on failure nothing new is left on disk."""
    frames = decode_frames(job.video_path)
    provider = make_provider(
        job.backbone,
        stub_height=job.stub_height,
        stub_width=job.stub_width,
        stub_channels=job.stub_channels,
        weights_vst=job.weights_vst,
        weights_blip=job.weights_blip,
    )

    # The video tower may consume several source frames per output frame
    # (e.g. a temporal patch stride); both tensors must still end up with
    # exactly t_frames steps or the bundle is unusable downstream.
    mult = provider.video_frame_multiple
    v_idx = uniform_frame_indices(frames.shape[0], job.t_frames * mult)
    t_idx = uniform_frame_indices(frames.shape[0], job.t_frames)
    f_vst = provider.video_features(frames[v_idx])
    f_blip = provider.token_features(frames[t_idx], job.prompt)

    if f_vst.ndim != 4:
        raise ExportError(f"video features must be (T,H,W,C), got {f_vst.shape}")
    if f_blip.ndim != 3:
        raise ExportError(f"token features must be (T,L,C), got {f_blip.shape}")
    if f_vst.shape[0] != job.t_frames or f_blip.shape[0] != job.t_frames:
        raise ExportError(
            f"frame axes disagree with --frames={job.t_frames}: "
            f"video {f_vst.shape[0]}, tokens {f_blip.shape[0]}"
        )
    if f_blip.shape[1] < 2:
        raise ExportError("token axis needs the sentence slot plus >= 1 word")

    out_dir = Path(job.out_dir)
    record = _stub_record(job, token_count=int(f_blip.shape[1]))
    vst_path = out_dir / record["f_vst_path"]
    blip_path = out_dir / record["f_blip_path"]
    manifest = out_dir / "manifest.jsonl"

    # Encode both payloads before touching disk so a rejected tensor
    # (e.g. non-finite values) cannot strand a half-written bundle.
    vst_blob = encode_tensor(f_vst)
    blip_blob = encode_tensor(f_blip)
    write_bytes_atomic(vst_path, vst_blob)
    write_bytes_atomic(blip_path, blip_blob)
    _merge_manifest(manifest, record)
    return ExportResult(vst_path, blip_path, manifest, record)
