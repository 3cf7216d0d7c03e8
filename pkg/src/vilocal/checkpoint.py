"""Versioned checkpoint archives.

A checkpoint is a zip file holding ``meta.json`` plus one ``.npy`` member per
parameter array. Member timestamps are pinned, so saving the same content
always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import state_checksum
from .errors import IntegrityError

FORMAT = "vilocal-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
SECTIONS = ("encoder", "decoder", "optimizer")


def to_numpy_state(state: dict) -> dict:
    return {k: (v.detach().cpu().numpy().copy() if isinstance(v, torch.Tensor) else np.asarray(v))
            for k, v in state.items()}


def to_torch_state(state: dict) -> dict:
    return {k: torch.from_numpy(np.array(v)) for k, v in state.items()}


def flatten_optimizer(opt_state: dict) -> tuple[dict, dict]:
    """Split a torch optimizer state dict into arrays and JSON-able metadata."""
    arrays = {}
    for idx, st in opt_state["state"].items():
        for key, val in st.items():
            arrays[f"{idx}/{key}"] = val.detach().cpu().numpy().copy() if isinstance(val, torch.Tensor) else np.asarray(val)
    return arrays, {"param_groups": opt_state["param_groups"]}


def unflatten_optimizer(arrays: dict, meta: dict) -> dict:
    state = {}
    for name, arr in arrays.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    return {"state": state, "param_groups": meta["param_groups"]}


@dataclass
class Checkpoint:
    stage: int
    step: int
    config: dict
    encoder: dict
    decoder: dict | None = None
    optimizer: dict | None = None
    optimizer_meta: dict | None = None
    extra: dict = field(default_factory=dict)

    def checksums(self) -> dict:
        out = {"encoder": state_checksum(self.encoder)}
        if self.decoder is not None:
            out["decoder"] = state_checksum(self.decoder)
        if self.optimizer is not None:
            out["optimizer"] = state_checksum(self.optimizer)
        return out

    @property
    def encoder_checksum(self) -> str:
        return state_checksum(self.encoder)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config": ckpt.config,
        "checksums": ckpt.checksums(),
        "optimizer_meta": ckpt.optimizer_meta,
        "extra": ckpt.extra,
        "sections": [s for s in SECTIONS if getattr(ckpt, s) is not None],
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for section in meta["sections"]:
            state = getattr(ckpt, section)
            for name in sorted(state):
                _write_member(zf, f"{section}/{name}.npy", _npy_bytes(state[name]))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise IntegrityError(f"{path}: checkpoint not found")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != FORMAT or meta.get("format_version") != FORMAT_VERSION:
                raise IntegrityError(
                    f"{path}: unsupported format {meta.get('format')!r} version {meta.get('format_version')!r}"
                    f" (expected {FORMAT!r} version {FORMAT_VERSION})")
            sections = {s: {} for s in meta["sections"]}
            for name in zf.namelist():
                if name == "meta.json":
                    continue
                section, _, rest = name.partition("/")
                if section not in sections or not rest.endswith(".npy"):
                    raise IntegrityError(f"{path}: unexpected member {name!r}")
                sections[section][rest[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        if isinstance(exc, IntegrityError):
            raise
        raise IntegrityError(f"{path}: corrupt checkpoint archive ({exc})") from exc

    ckpt = Checkpoint(
        stage=meta["stage"], step=meta["step"], config=meta["config"],
        encoder=sections.get("encoder", {}), decoder=sections.get("decoder"),
        optimizer=sections.get("optimizer"), optimizer_meta=meta.get("optimizer_meta"),
        extra=meta.get("extra", {}),
    )
    actual = ckpt.checksums()
    for section, expected in meta["checksums"].items():
        if actual.get(section) != expected:
            raise IntegrityError(
                f"{path}: {section} checksum mismatch (recorded {expected}, computed {actual.get(section)})")
    return ckpt


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
