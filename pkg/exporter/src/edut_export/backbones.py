"""Real backbone providers behind lazy imports.

Both providers require weights that are already on disk; they never
download. Heavy dependencies (torch, torchvision, transformers) are
imported only when a provider is actually constructed, so the stub path
stays dependency-free.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ExportError
from .stub import StubBackbone, tokenize

# Kinetics-400 statistics, the standard normalization for video backbones.
_VIDEO_MEAN = (0.43216, 0.394666, 0.37645)
_VIDEO_STD = (0.22803, 0.22145, 0.216989)
_VIDEO_SIDE = 224


class VideoSwinProvider:
    """(T,H,W,C) features tapped from a 3D Swin video encoder."""

    name = "videoswin"
    video_frame_multiple = 2  # temporal patch stride halves the frame axis

    def __init__(self, weights_path):
        if weights_path is None:
            raise ExportError(
                "videoswin requires --weights-vst pointing at a local "
                "state-dict file"
            )
        weights_path = Path(weights_path)
        if not weights_path.is_file():
            raise ExportError(f"video backbone weights not found: {weights_path}")
        try:
            import torch
            from torchvision.models.video import swin3d_t
        except ImportError as exc:
            raise ExportError(
                "videoswin needs torch and torchvision "
                "(install the 'backbones' extra)"
            ) from exc
        self._torch = torch
        model = swin3d_t(weights=None)
        state = torch.load(weights_path, map_location="cpu")
        model.load_state_dict(state)
        model.eval()
        self._model = model

    def _preprocess(self, frames: np.ndarray):
        torch = self._torch
        x = torch.from_numpy(frames.astype(np.float32) / 255.0)
        x = x.permute(0, 3, 1, 2)  # (T, 3, H, W)
        x = torch.nn.functional.interpolate(
            x, size=(_VIDEO_SIDE, _VIDEO_SIDE), mode="bilinear",
            align_corners=False,
        )
        mean = torch.tensor(_VIDEO_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_VIDEO_STD).view(1, 3, 1, 1)
        x = (x - mean) / std
        return x.permute(1, 0, 2, 3).unsqueeze(0)  # (1, 3, T, H, W)

    def video_features(self, frames: np.ndarray) -> np.ndarray:
        torch = self._torch
        model = self._model
        with torch.no_grad():
            x = model.patch_embed(self._preprocess(frames))  # (B,T',H',W',C)
            x = model.pos_drop(x)
            x = model.features(x)
            grid = model.norm(x)
        out = grid.squeeze(0).cpu().numpy().astype(np.float32)  # (T',H',W',C)
        if out.ndim != 4:
            raise ExportError(f"video backbone produced rank-{out.ndim} features")
        return out

    def token_features(self, frames: np.ndarray, prompt: str) -> np.ndarray:
        raise ExportError(
            "videoswin provides video features only; pair it with a "
            "multimodal text provider"
        )


class BlipProvider:
    """(T,L,C) token features from a multimodal encoder, frame by frame.

    Position 0 of the token axis is the encoder's classification slot,
    carrying the sentence-level feature.
    """

    name = "blip"
    video_frame_multiple = 1

    def __init__(self, weights_dir):
        if weights_dir is None:
            raise ExportError(
                "blip requires --weights-blip pointing at a local model "
                "directory"
            )
        weights_dir = Path(weights_dir)
        if not weights_dir.is_dir():
            raise ExportError(
                f"multimodal backbone directory not found: {weights_dir}"
            )
        try:
            import torch
            from transformers import BlipModel, BlipProcessor
        except ImportError as exc:
            raise ExportError(
                "blip needs torch and transformers "
                "(install the 'backbones' extra)"
            ) from exc
        self._torch = torch
        self._processor = BlipProcessor.from_pretrained(
            weights_dir, local_files_only=True
        )
        model = BlipModel.from_pretrained(weights_dir, local_files_only=True)
        model.eval()
        layers = model.text_model.encoder.layer
        if not layers or not hasattr(layers[0], "crossattention"):
            raise ExportError(
                f"{weights_dir}: text encoder has no cross-attention layers; "
                "token features need an image-grounded text encoder "
                "(is_decoder=true in the text config)"
            )
        self._model = model

    def video_features(self, frames: np.ndarray) -> np.ndarray:
        raise ExportError(
            "blip provides token features only; pair it with a video provider"
        )

    def token_features(self, frames: np.ndarray, prompt: str) -> np.ndarray:
        torch = self._torch
        per_frame = []
        with torch.no_grad():
            for frame in frames:
                inputs = self._processor(
                    images=frame, text=prompt, return_tensors="pt"
                )
                vision = self._model.vision_model(
                    pixel_values=inputs["pixel_values"]
                ).last_hidden_state
                text = self._model.text_model(
                    input_ids=inputs["input_ids"],
                    attention_mask=inputs["attention_mask"],
                    encoder_hidden_states=vision,
                ).last_hidden_state
                per_frame.append(text.squeeze(0).cpu().numpy())
        out = np.stack(per_frame).astype(np.float32)  # (T, L, C)
        if out.ndim != 3 or out.shape[1] < 2:
            raise ExportError(
                f"multimodal backbone produced unusable shape {out.shape}"
            )
        return out


class PairedProvider:
    """Route video features and token features to two sub-providers."""

    def __init__(self, video_provider, text_provider):
        self.video = video_provider
        self.text = text_provider
        self.name = f"{video_provider.name}+{text_provider.name}"
        self.video_frame_multiple = video_provider.video_frame_multiple

    def video_features(self, frames: np.ndarray) -> np.ndarray:
        return self.video.video_features(frames)

    def token_features(self, frames: np.ndarray, prompt: str) -> np.ndarray:
        return self.text.token_features(frames, prompt)


BACKBONES = ("stub", "videoswin+blip")


def make_provider(backbone: str, *, stub_height=4, stub_width=4,
                  stub_channels=16, weights_vst=None, weights_blip=None):
    if backbone == "stub":
        return StubBackbone(stub_height, stub_width, stub_channels)
    if backbone == "videoswin+blip":
        return PairedProvider(
            VideoSwinProvider(weights_vst), BlipProvider(weights_blip)
        )
    raise ExportError(f"unknown backbone {backbone!r} (choose from {BACKBONES})")


__all__ = [
    "BACKBONES",
    "BlipProvider",
    "PairedProvider",
    "StubBackbone",
    "VideoSwinProvider",
    "make_provider",
    "tokenize",
]
