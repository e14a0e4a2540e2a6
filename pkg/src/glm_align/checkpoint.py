"""Binary checkpoint container for adapter parameters, Adam moments and the training RNG.

Layout (all integers little-endian; see FORMATS.md):

    magic    8 bytes  b"GLMACKPT"
    version  u32
    hlen     u64      length of the JSON header
    header   hlen bytes, UTF-8 JSON with sorted keys
    blocks   header["n_blocks"] tensor blocks:
               u16 name length, name (UTF-8), u8 dtype code, u8 ndim,
               ndim x u64 dims, u64 nbytes, raw C-order bytes
    digest   32 bytes SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .adapter import GLMAdapter
from .config import RunConfig, ScaleProfile, config_hash
from .errors import CheckpointError, CheckpointTruncatedError, CheckpointVersionError, ConfigHashMismatch
from .training import TrainState, make_optimizer

MAGIC = b"GLMACKPT"
FORMAT_VERSION = 1
DTYPE_CODES = {torch.float64: 0, torch.float32: 1, torch.int64: 2, torch.uint8: 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8", 3: "u1"}


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    prof = dict(d.pop("profile"))
    prof["latent_shape"] = tuple(prof["latent_shape"])
    return RunConfig(profile=ScaleProfile(**prof), **d)


def state_blocks(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    blocks = [(f"adapter/{n}", p.detach()) for n, p in state.adapter.named_parameters()]
    for name, (m, v) in state.moments().items():
        blocks.append((f"adam/exp_avg/{name}", m))
        blocks.append((f"adam/exp_avg_sq/{name}", v))
    blocks.append(("rng/train", state.rng.get_state()))
    return blocks


def _encode_block(name: str, t: torch.Tensor) -> bytes:
    if t.dtype not in DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {t.dtype} for block {name}")
    code = DTYPE_CODES[t.dtype]
    raw = np.ascontiguousarray(t.detach().cpu().numpy()).astype(NUMPY_DTYPES[code], copy=False).tobytes()
    name_b = name.encode()
    out = struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", code, t.dim())
    out += struct.pack(f"<{t.dim()}Q", *t.shape) + struct.pack("<Q", len(raw)) + raw
    return out


def save_checkpoint(state: TrainState, cfg: RunConfig, path: str | Path) -> Path:
    blocks = state_blocks(state)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "epoch": state.epoch,
        "step": state.step,
        "phi": state.phi,
        "adam_step": state.adam_step,
        "profile": cfg.to_dict()["profile"],
        "n_blocks": len(blocks),
        "blocks": [name for name, _ in blocks],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes)
    for name, t in blocks:
        buf.write(_encode_block(name, t))
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload + hashlib.sha256(payload).digest())
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse and verify a container; returns (header, blocks). Nothing partial is returned on error."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    blocks = {}
    for _ in range(header["n_blocks"]):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} in block {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=NUMPY_DTYPES[code]).reshape(shape)
        blocks[name] = torch.from_numpy(arr.copy())
    payload_end = r.pos
    digest = r.take(32)
    if hashlib.sha256(data[:payload_end]).digest() != digest:
        raise CheckpointError(f"{path}: digest mismatch (corrupt checkpoint)")
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return header, blocks


def load_checkpoint(
    path: str | Path, cfg: RunConfig | None = None, force: bool = False
) -> tuple[TrainState, RunConfig, dict]:
    """Restore a TrainState. With ``cfg`` given, its hash must match the stored one unless ``force``."""
    header, blocks = read_container(path)
    stored = config_from_dict(header["config"])
    if cfg is None:
        cfg = stored
    elif config_hash(cfg) != header["config_hash"] and not force:
        raise ConfigHashMismatch(f"{path}: config hash {header['config_hash'][:12]} != {config_hash(cfg)[:12]}")

    adapter = GLMAdapter.from_config(cfg)
    optimizer = make_optimizer(adapter, cfg.lr)
    with torch.no_grad():
        for name, p in adapter.named_parameters():
            key = f"adapter/{name}"
            if key not in blocks or tuple(blocks[key].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: block {key} missing or mis-shaped")
            p.copy_(blocks[key])
    adam_step = header["adam_step"]
    if adam_step:
        step_dtype = torch.float64 if torch.get_default_dtype() == torch.float64 else torch.float32
        for name, p in adapter.named_parameters():
            optimizer.state[p] = {
                "step": torch.tensor(float(adam_step), dtype=step_dtype),
                "exp_avg": blocks[f"adam/exp_avg/{name}"].clone(),
                "exp_avg_sq": blocks[f"adam/exp_avg_sq/{name}"].clone(),
            }
    rng = torch.Generator()
    rng.set_state(blocks["rng/train"])
    state = TrainState(adapter, optimizer, header["epoch"], header["step"], header["phi"], rng)
    return state, cfg, header


def inspect_checkpoint(path: str | Path) -> dict:
    header, blocks = read_container(path)
    summary = {k: v for k, v in header.items() if k not in ("config", "blocks")}
    summary["adapter_params"] = sum(t.numel() for n, t in blocks.items() if n.startswith("adapter/"))
    return summary
