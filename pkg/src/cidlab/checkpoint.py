"""Named-tensor parameter sets and the on-disk checkpoint container.

A checkpoint is a directory holding ``manifest.json`` plus one raw
little-endian float32 blob per tensor under ``tensors/``, named by the
parameter path (slashes become subdirectories). The manifest records the
architecture id, tensor shapes, the run-config hash, the noise schedule,
and the fixed condition embeddings, making the directory the unit of
reproducibility. Serialization is canonical (sorted names, sorted JSON
keys), so save -> load -> save produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"
TENSOR_DIR = "tensors"
FORMAT_TAG = "cidlab-ckpt-v1"


class CheckpointError(RuntimeError):
    """Manifest/config mismatch or a malformed checkpoint directory."""


@dataclass
class ParamSet:
    """Ordered map from layer-qualified names to real tensors, plus metadata.

    Names are unique by construction (dict keys); shapes are fixed after
    construction; the blob round trip is lossless for float32 tensors.
    """

    tensors: "OrderedDict[str, torch.Tensor]"
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: torch.nn.Module, **meta) -> "ParamSet":
        out = OrderedDict()
        for name, t in module.state_dict().items():
            out[name] = t.detach().to(torch.float32).clone()
        return cls(tensors=out, meta=dict(meta))

    def load_into(self, module: torch.nn.Module) -> None:
        module.load_state_dict(self.tensors, strict=True)

    def checksum(self) -> str:
        """SHA-256 over name-sorted raw little-endian float32 bytes."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(_to_blob(self.tensors[name]))
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        if set(self.tensors) != set(other.tensors):
            return False
        return all(torch.equal(self.tensors[k], other.tensors[k]) for k in self.tensors)


def canonical_json(obj) -> str:
    """Deterministic JSON used for hashing and for manifest bytes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _to_blob(t: torch.Tensor) -> bytes:
    a = t.detach().cpu().to(torch.float32).contiguous().numpy()
    return a.astype("<f4", copy=False).tobytes()


def _from_blob(raw: bytes, shape) -> torch.Tensor:
    a = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return torch.from_numpy(a)


def module_checksum(module: torch.nn.Module) -> str:
    return ParamSet.from_module(module).checksum()


def save_tensors(
    path: Path,
    groups: Dict[str, "OrderedDict[str, torch.Tensor]"],
    manifest_extra: Optional[dict] = None,
) -> None:
    """Write groups of named tensors plus a manifest to ``path``.

    Tensor paths are ``<group>/<name>``; each becomes one ``.bin`` blob.
    """
    path = Path(path)
    (path / TENSOR_DIR).mkdir(parents=True, exist_ok=True)
    entries = {}
    for group in sorted(groups):
        for name in sorted(groups[group]):
            t = groups[group][name]
            tpath = f"{group}/{name}"
            entries[tpath] = {"shape": list(t.shape), "dtype": "float32"}
            blob_file = path / TENSOR_DIR / f"{tpath}.bin"
            blob_file.parent.mkdir(parents=True, exist_ok=True)
            blob_file.write_bytes(_to_blob(t))
    manifest = {"format": FORMAT_TAG, "tensors": entries}
    manifest.update(manifest_extra or {})
    (path / MANIFEST_NAME).write_text(canonical_json(manifest))


def load_manifest(path: Path) -> dict:
    path = Path(path)
    mfile = path / MANIFEST_NAME
    if not mfile.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {path}")
    manifest = json.loads(mfile.read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_tensors(path: Path, manifest: Optional[dict] = None) -> Dict[str, "OrderedDict[str, torch.Tensor]"]:
    """Read every tensor group recorded in the manifest."""
    path = Path(path)
    manifest = manifest or load_manifest(path)
    groups: Dict[str, OrderedDict] = {}
    for tpath in sorted(manifest["tensors"]):
        entry = manifest["tensors"][tpath]
        blob_file = path / TENSOR_DIR / f"{tpath}.bin"
        if not blob_file.exists():
            raise CheckpointError(f"missing blob for tensor {tpath}")
        group, name = tpath.split("/", 1)
        groups.setdefault(group, OrderedDict())[name] = _from_blob(
            blob_file.read_bytes(), entry["shape"]
        )
    return groups


def check_config_hash(manifest: dict, config: dict) -> None:
    """Hard error when a checkpoint was produced under a different config."""
    want = manifest.get("config_hash")
    have = config_hash(config)
    if want != have:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {want!r} vs requested {have!r}"
        )


def directory_digest(path: Path) -> str:
    """SHA-256 over manifest bytes plus all blob bytes, in sorted order.

    Used by the byte-stability tests: two checkpoints are identical iff
    their digests match.
    """
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST_NAME).read_bytes())
    for f in sorted((path / TENSOR_DIR).rglob("*.bin")):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def checksum_many(modules: Iterable[torch.nn.Module]) -> list:
    return [module_checksum(m) for m in modules]
