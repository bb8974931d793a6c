"""Binäres Checkpoint-Format (TMCK).

Aufbau (alles little-endian):
    b"TMCK" | u32 Version | u32 Länge + UTF-8-JSON-Metadaten |
    je Parameter: u32 Länge + Name | u8 dtype (f32=0, f64=1) | u32 Rang |
                  u64 je Dimension | rohe Element-Bytes

Metadaten enthalten die ModelConfig (inkl. M), Präzision, Laufinfos und ggf.
den Adam-Schrittzähler. Adam-Momente liegen als Records "optim/m/<name>" und
"optim/v/<name>" hinter den Modellparametern.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from src.config.defaults import ModelConfig
from src.core.errors import CheckpointError, ConfigError
from src.core.model import TimeMachineModel
from src.core.train import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"TMCK"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

_OPTIM_M = "optim/m/"
_OPTIM_V = "optim/v/"


@dataclass
class Checkpoint:
    """Gelesener Checkpoint.

    Attributes:
        config: ModelConfig-Snapshot (inkl. Kanalanzahl M).
        arrays: Modellparameter nach vollem Namen.
        metadata: Komplettes Metadaten-Dokument.
        optimizer: Adam-Zustand, falls gespeichert.
    """
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    optimizer: Optional[AdamState] = None

    @property
    def run_info(self) -> dict:
        return self.metadata.get("run", {})

    def build_model(self, expected_channels: Optional[int] = None) -> TimeMachineModel:
        """Baut das Netz und lädt die Parameter.

        Raises:
            CheckpointError: Wenn `expected_channels` nicht zum gespeicherten M passt.
        """
        if expected_channels is not None and expected_channels != self.config.channels:
            raise CheckpointError(
                f"Checkpoint erwartet M={self.config.channels}, Datensatz hat M={expected_channels}"
            )
        model = TimeMachineModel(self.config)
        model.load_arrays(self.arrays)
        return model


def _write_record(handle, name: str, array: np.ndarray) -> None:
    dtype = np.dtype(array.dtype)
    if dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"Nicht unterstützter dtype für '{name}': {dtype}")
    encoded = name.encode("utf-8")
    handle.write(struct.pack("<I", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<BI", _DTYPE_TAGS[dtype], array.ndim))
    for extent in array.shape:
        handle.write(struct.pack("<Q", extent))
    handle.write(np.ascontiguousarray(array, dtype=dtype.newbyteorder("<")).tobytes())


def save_checkpoint(
    path,
    model: TimeMachineModel,
    run_info: Optional[dict] = None,
    optimizer: Optional[AdamState] = None,
) -> Path:
    """Schreibt Modell (und optional Adam-Zustand) als TMCK-Datei.

    Returns:
        Pfad der geschriebenen Datei.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "model_config": model.config.to_dict(),
        "precision": model.config.dtype,
        "run": run_info or {},
    }
    if optimizer is not None:
        metadata["optimizer"] = {
            "t": optimizer.t,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
    document = json.dumps(metadata, ensure_ascii=False, sort_keys=True).encode("utf-8")

    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        handle.write(struct.pack("<I", len(document)))
        handle.write(document)
        for param in model.parameters():
            _write_record(handle, param.name, param.tensor.data)
        if optimizer is not None:
            for name in sorted(optimizer.m):
                _write_record(handle, _OPTIM_M + name, optimizer.m[name])
                _write_record(handle, _OPTIM_V + name, optimizer.v[name])

    logger.info(f"Checkpoint gespeichert: {path}")
    return path


def _read_exact(buffer: memoryview, offset: int, size: int, what: str) -> tuple[memoryview, int]:
    if offset + size > len(buffer):
        raise CheckpointError(f"Checkpoint abgeschnitten beim Lesen von {what}")
    return buffer[offset:offset + size], offset + size


def load_checkpoint(path) -> Checkpoint:
    """Liest eine TMCK-Datei.

    Raises:
        CheckpointError: Bei fehlender Datei, falschem Magic, unbekannter
            Version oder abgeschnittenen Records.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint nicht gefunden: {path}")
    buffer = memoryview(path.read_bytes())

    magic, offset = _read_exact(buffer, 0, 4, "Magic")
    if bytes(magic) != MAGIC:
        raise CheckpointError(f"Keine TMCK-Datei (Magic {bytes(magic)!r}): {path}")
    raw, offset = _read_exact(buffer, offset, 4, "Version")
    (version,) = struct.unpack("<I", raw)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unbekannte Checkpoint-Version {version}")
    raw, offset = _read_exact(buffer, offset, 4, "Metadatenlänge")
    (doc_len,) = struct.unpack("<I", raw)
    raw, offset = _read_exact(buffer, offset, doc_len, "Metadaten")
    try:
        metadata = json.loads(bytes(raw).decode("utf-8"))
        config = ModelConfig.from_dict(metadata["model_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ConfigError) as e:
        raise CheckpointError(f"Metadaten unlesbar: {e}") from e

    records: dict[str, np.ndarray] = {}
    while offset < len(buffer):
        raw, offset = _read_exact(buffer, offset, 4, "Namenslänge")
        (name_len,) = struct.unpack("<I", raw)
        raw, offset = _read_exact(buffer, offset, name_len, "Name")
        name = bytes(raw).decode("utf-8")
        raw, offset = _read_exact(buffer, offset, 5, f"Header von '{name}'")
        tag, rank = struct.unpack("<BI", raw)
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"Unbekannter dtype-Tag {tag} bei '{name}'")
        shape = []
        for _ in range(rank):
            raw, offset = _read_exact(buffer, offset, 8, f"Dimension von '{name}'")
            shape.append(struct.unpack("<Q", raw)[0])
        dtype = _TAG_DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        raw, offset = _read_exact(buffer, offset, count * dtype.itemsize, f"Daten von '{name}'")
        records[name] = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)

    arrays = {k: v for k, v in records.items() if not k.startswith(("optim/",))}
    optimizer = None
    if "optimizer" in metadata:
        info = metadata["optimizer"]
        optimizer = AdamState(
            lr=info["lr"],
            t=info["t"],
            beta1=info["beta1"],
            beta2=info["beta2"],
            eps=info["eps"],
            m={k[len(_OPTIM_M):]: v for k, v in records.items() if k.startswith(_OPTIM_M)},
            v={k[len(_OPTIM_V):]: v for k, v in records.items() if k.startswith(_OPTIM_V)},
        )
    logger.info(f"Checkpoint geladen: {path} ({len(arrays)} Parameter, M={config.channels})")
    return Checkpoint(config=config, arrays=arrays, metadata=metadata, optimizer=optimizer)
