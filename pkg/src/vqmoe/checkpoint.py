"""Checkpoint container: a zip archive of named tensor entries plus the
model configuration, with a config hash verified on load.

Archives are written with stored (uncompressed) entries, sorted names, and a
fixed timestamp, so saving identical content twice produces byte-identical
files.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig
from .tensorio import from_bytes, to_bytes

CHECKPOINT_VERSION = 1
_EPOCH_STAMP = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH_STAMP)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _config_bytes(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


@dataclass
class LoadedCheckpoint:
    config: ModelConfig
    state: dict
    optimizer_state: dict | None
    epoch: int | None
    meta: dict


def save_checkpoint(
    path,
    config: ModelConfig,
    state: dict,
    optimizer_state: dict | None = None,
    epoch: int | None = None,
) -> None:
    """Write parameters (name -> array) and config to a checkpoint file."""
    if not state:
        raise FormatError("checkpoint needs at least one parameter")
    config_payload = _config_bytes(config)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config_sha256": hashlib.sha256(config_payload).hexdigest(),
        "epoch": epoch,
        "param_names": sorted(state),
        "has_optimizer_state": optimizer_state is not None,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "meta.json",
                     json.dumps(meta, sort_keys=True, indent=2).encode("utf-8"))
        _write_entry(zf, "config.json", config_payload)
        for name in sorted(state):
            arr = state[name].data if hasattr(state[name], "data") else state[name]
            _write_entry(zf, f"params/{name}.edut", to_bytes(np.asarray(arr)))
        if optimizer_state is not None:
            _write_entry(
                zf, "optim/meta.json",
                json.dumps({"t": int(optimizer_state["t"])},
                           sort_keys=True).encode("utf-8"),
            )
            for kind in ("m", "v"):
                table = optimizer_state[kind]
                for name in sorted(table):
                    _write_entry(zf, f"optim/{kind}/{name}.edut",
                                 to_bytes(np.asarray(table[name])))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read a checkpoint, verifying structure and the config hash."""
    p = Path(path)
    if not p.exists():
        raise FormatError(f"checkpoint not found: {p}")
    try:
        zf = zipfile.ZipFile(io.BytesIO(p.read_bytes()))
    except zipfile.BadZipFile as exc:
        raise FormatError(f"not a checkpoint archive: {exc}") from exc

    names = set(zf.namelist())
    for required in ("meta.json", "config.json"):
        if required not in names:
            raise FormatError(f"checkpoint missing {required}")
    meta = json.loads(zf.read("meta.json"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {meta.get('format_version')}"
        )
    config_payload = zf.read("config.json")
    digest = hashlib.sha256(config_payload).hexdigest()
    if digest != meta.get("config_sha256"):
        raise FormatError("config hash mismatch: checkpoint corrupted")
    config = ModelConfig.from_dict(json.loads(config_payload))

    state: dict = {}
    for name in meta.get("param_names", []):
        entry = f"params/{name}.edut"
        if entry not in names:
            raise FormatError(f"checkpoint missing parameter entry {entry}")
        state[name] = from_bytes(zf.read(entry)).data
    if not state:
        raise FormatError("checkpoint has no parameters")

    optimizer_state = None
    if meta.get("has_optimizer_state"):
        if "optim/meta.json" not in names:
            raise FormatError("checkpoint missing optimizer state")
        optim_meta = json.loads(zf.read("optim/meta.json"))
        optimizer_state = {"t": int(optim_meta["t"]), "m": {}, "v": {}}
        for kind in ("m", "v"):
            for name in meta["param_names"]:
                entry = f"optim/{kind}/{name}.edut"
                if entry not in names:
                    raise FormatError(f"checkpoint missing {entry}")
                optimizer_state[kind][name] = from_bytes(zf.read(entry)).data

    return LoadedCheckpoint(
        config=config,
        state=state,
        optimizer_state=optimizer_state,
        epoch=meta.get("epoch"),
        meta=meta,
    )
