"""Dataset records, JSONL manifests, stratified split generation, and the
planted-structure synthetic corpus used for end-to-end verification.

The synthetic generator plants each latent quality score into a designated
channel block of the corresponding feature tensor (plus Gaussian noise), so
a simple pooled readout provably recovers the scores and a trained model can
be checked against that certificate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .model import ModelConfig
from .tensorio import read_tensor, write_tensor
from .training import TrainSample

log = logging.getLogger(__name__)

GENERATOR_MODELS = (
    "CogVideo",
    "Dreamina",
    "Gen-3",
    "Hotshot-XL",
    "Kling",
    "LaVie",
    "LVDM",
    "Show-1",
    "Text2Video-Zero",
    "VideoCrafter",
)
CATEGORIES = ("Numbers", "Geometry", "Measurement", "Probability")
SPLIT_NAMES = ("train", "val", "test")
SPLIT_RATIOS = (0.6, 0.2, 0.2)
LABEL_KEYS = ("q_spatial", "q_temporal", "q_overall_percept", "q_word", "q_sentence")
RECORD_KEYS = (
    "video_id", "prompt", "token_count", "generator_model", "category",
    "f_vst_path", "f_blip_path", "labels", "token_mask",
)


def _check_score(name: str, value) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise FormatError(f"label {name} must be a number, got {value!r}")
    v = float(value)
    if not (1.0 <= v <= 5.0) or not math.isfinite(v):
        raise FormatError(f"label {name} must lie in [1, 5], got {v}")
    return v


@dataclass(frozen=True)
class VideoRecord:
    """One video: identity, provenance, feature paths, and labels.

    token_count is the token-axis length D of the alignment features; word
    labels and the mask cover positions 1..D-1 (position 0 is the global
    sentence slot). Masked positions may carry a null label.
    """

    video_id: str
    prompt: str
    token_count: int
    generator_model: str
    category: str
    f_vst_path: str
    f_blip_path: str
    labels: dict
    token_mask: tuple

    def __post_init__(self):
        if not self.video_id:
            raise FormatError("video_id must be non-empty")
        if isinstance(self.token_count, bool) or not isinstance(self.token_count, int):
            raise FormatError("token_count must be an integer")
        if self.token_count < 2:
            raise FormatError("token_count must be >= 2 (sentence slot + words)")
        if self.generator_model not in GENERATOR_MODELS:
            raise FormatError(f"unknown generator_model {self.generator_model!r}")
        if self.category not in CATEGORIES:
            raise FormatError(f"unknown category {self.category!r}")
        if not self.f_vst_path or not self.f_blip_path:
            raise FormatError("feature paths must be non-empty")

        if set(self.labels) != set(LABEL_KEYS):
            raise FormatError(
                f"labels must have exactly keys {sorted(LABEL_KEYS)}, "
                f"got {sorted(self.labels)}"
            )
        labels = dict(self.labels)
        for key in ("q_spatial", "q_temporal", "q_overall_percept", "q_sentence"):
            labels[key] = _check_score(key, labels[key])

        mask = tuple(bool(m) for m in self.token_mask)
        if len(mask) != self.token_count - 1:
            raise FormatError(
                f"token_mask length {len(mask)} != token_count-1 "
                f"({self.token_count - 1})"
            )
        words = list(labels["q_word"])
        if len(words) != self.token_count - 1:
            raise FormatError(
                f"q_word length {len(words)} != token_count-1 "
                f"({self.token_count - 1})"
            )
        for i, (w, m) in enumerate(zip(words, mask)):
            if w is None:
                if m:
                    raise FormatError(f"q_word[{i + 1}] is null but unmasked")
            else:
                words[i] = _check_score(f"q_word[{i + 1}]", w)
        labels["q_word"] = words
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "token_mask", mask)

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "prompt": self.prompt,
            "token_count": self.token_count,
            "generator_model": self.generator_model,
            "category": self.category,
            "f_vst_path": self.f_vst_path,
            "f_blip_path": self.f_blip_path,
            "labels": dict(self.labels),
            "token_mask": list(self.token_mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VideoRecord":
        unknown = set(d) - set(RECORD_KEYS)
        if unknown:
            raise FormatError(f"unknown record keys {sorted(unknown)}")
        missing = set(RECORD_KEYS) - set(d)
        if missing:
            raise FormatError(f"missing record keys {sorted(missing)}")
        return cls(**{k: d[k] for k in RECORD_KEYS})


def write_manifest(records, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path) -> list[VideoRecord]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    records: list[VideoRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            rec = VideoRecord.from_dict(payload)
        except FormatError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        if rec.video_id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate video_id {rec.video_id}")
        seen.add(rec.video_id)
        records.append(rec)
    if not records:
        raise FormatError(f"manifest {path} contains no records")
    return records


@dataclass(frozen=True)
class SplitSpec:
    """One train/val/test assignment over a corpus."""

    seed: int
    assignment: dict

    def __post_init__(self):
        for vid, split in self.assignment.items():
            if split not in SPLIT_NAMES:
                raise FormatError(f"unknown split {split!r} for {vid}")

    def ids_for(self, split: str) -> list[str]:
        if split not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {split!r}")
        return sorted(v for v, s in self.assignment.items() if s == split)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        unknown = set(d) - {"seed", "assignment"}
        if unknown:
            raise FormatError(f"unknown split keys {sorted(unknown)}")
        return cls(seed=int(d["seed"]), assignment=dict(d["assignment"]))


def _largest_remainder(n: int) -> tuple[int, int, int]:
    """Cut n items into 6:2:2 with per-bin error < 1."""
    quotas = [n * r for r in SPLIT_RATIOS]
    counts = [int(math.floor(q)) for q in quotas]
    remainder = n - sum(counts)
    by_frac = sorted(
        range(3), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in by_frac[:remainder]:
        counts[i] += 1
    return tuple(counts)


def make_splits(records: list[VideoRecord], seed_count: int = 10) -> list[SplitSpec]:
    """Stratified 6:2:2 splits, one per seed in [0, seed_count).

    Strata are (generator_model, category) groups; each is shuffled and cut
    with largest-remainder rounding, so per-stratum counts deviate at most
    1 from the exact ratios. Strata smaller than 3 cannot populate every
    bin and are flagged with a warning.
    """
    if not records:
        raise ShapeError("make_splits needs at least one record")
    if seed_count < 1:
        raise ConfigError("seed_count must be >= 1")
    strata: dict[tuple[str, str], list[str]] = {}
    for rec in records:
        strata.setdefault((rec.generator_model, rec.category), []).append(rec.video_id)
    for key, ids in strata.items():
        if len(ids) != len(set(ids)):
            raise FormatError(f"duplicate video ids in stratum {key}")
        if len(ids) < 3:
            log.warning(
                "stratum %s has %d videos (< 3): some bins stay empty", key, len(ids)
            )

    splits = []
    for seed in range(seed_count):
        rng = np.random.default_rng(seed)
        assignment: dict[str, str] = {}
        for key in sorted(strata):
            ids = sorted(strata[key])
            order = rng.permutation(len(ids))
            shuffled = [ids[i] for i in order]
            n_train, n_val, n_test = _largest_remainder(len(ids))
            for vid in shuffled[:n_train]:
                assignment[vid] = "train"
            for vid in shuffled[n_train : n_train + n_val]:
                assignment[vid] = "val"
            for vid in shuffled[n_train + n_val :]:
                assignment[vid] = "test"
        splits.append(SplitSpec(seed=seed, assignment=assignment))
    return splits


# channel-block recipe for the planted synthetic structure
def _synth_recipe(config: ModelConfig) -> dict:
    c = config.channels
    return {
        "spatial_channels": [0, c // 4],
        "temporal_channels": [c // 4, c // 2],
        "alignment_channels": [0, c // 2],
        "offset_scale": "(q - 3) / 2 added to the block mean",
        "overall": "q_overall_percept = (q_spatial + q_temporal) / 2",
    }


def gen_synthetic(
    config: ModelConfig,
    n_videos: int,
    sigma: float,
    seed: int,
    out_dir,
) -> tuple[list[VideoRecord], Path]:
    """Write a synthetic corpus: feature tensors, manifest, and recipe.

    Per video, latent scores are drawn uniformly from [1, 5] before any
    noise; each score shifts one channel block of the features by
    (q - 3) / 2 on top of sigma-scaled Gaussian noise. Generator models and
    categories cycle so strata stay balanced.
    """
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    if n_videos < 1:
        raise ConfigError("n_videos must be >= 1")
    if config.channels < 4:
        raise ConfigError("synthetic generator needs at least 4 channels")

    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    t, h, w, c, d = (config.t_frames, config.height, config.width,
                     config.channels, config.l_tokens)
    c4, c2 = c // 4, c // 2
    dtype = np.dtype(config.dtype)

    records: list[VideoRecord] = []
    for i in range(n_videos):
        video_id = f"synth{i:05d}"
        model = GENERATOR_MODELS[i % len(GENERATOR_MODELS)]
        category = CATEGORIES[(i // len(GENERATOR_MODELS)) % len(CATEGORIES)]

        # latents first so changing sigma never changes the labels
        q_spatial = float(rng.uniform(1.0, 5.0))
        q_temporal = float(rng.uniform(1.0, 5.0))
        q_word = [float(v) for v in rng.uniform(1.0, 5.0, size=d - 1)]
        q_sentence = float(rng.uniform(1.0, 5.0))
        q_overall = (q_spatial + q_temporal) / 2.0

        f_vst = rng.standard_normal((t, h, w, c)) * sigma
        f_vst[..., :c4] += (q_spatial - 3.0) / 2.0
        f_vst[..., c4:c2] += (q_temporal - 3.0) / 2.0

        f_blip = rng.standard_normal((t, d, c)) * sigma
        f_blip[:, 0, :c2] += (q_sentence - 3.0) / 2.0
        for pos in range(1, d):
            f_blip[:, pos, :c2] += (q_word[pos - 1] - 3.0) / 2.0

        vst_path = f"features/{video_id}_vst.edut"
        blip_path = f"features/{video_id}_blip.edut"
        write_tensor(out_dir / vst_path, f_vst.astype(dtype))
        write_tensor(out_dir / blip_path, f_blip.astype(dtype))

        records.append(VideoRecord(
            video_id=video_id,
            prompt=f"{category.lower()} clip {i:05d} " + " ".join(
                f"tok{j}" for j in range(1, d)),
            token_count=d,
            generator_model=model,
            category=category,
            f_vst_path=vst_path,
            f_blip_path=blip_path,
            labels={
                "q_spatial": q_spatial,
                "q_temporal": q_temporal,
                "q_overall_percept": q_overall,
                "q_word": q_word,
                "q_sentence": q_sentence,
            },
            token_mask=tuple(True for _ in range(d - 1)),
        ))

    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    meta = {
        "n_videos": n_videos,
        "sigma": sigma,
        "seed": seed,
        "config": config.to_dict(),
        "recipe": _synth_recipe(config),
    }
    (out_dir / "dataset_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return records, manifest_path


def load_sample(record: VideoRecord, base_dir) -> TrainSample:
    """Read a record's feature tensors and bundle them with its targets."""
    base = Path(base_dir)
    f_vst = read_tensor(base / record.f_vst_path)
    f_blip = read_tensor(base / record.f_blip_path)
    targets = dict(record.labels)
    targets["token_mask"] = list(record.token_mask)
    return TrainSample(
        video_id=record.video_id, f_vst=f_vst, f_blip=f_blip, targets=targets
    )


def load_samples(records, base_dir) -> list[TrainSample]:
    return [load_sample(r, base_dir) for r in records]
