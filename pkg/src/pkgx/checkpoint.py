"""Versioned policy checkpoints (``*.pkgx-ckpt``).

Layout: the magic line ``PKGX-CKPT v1``, one line of JSON metadata (which
records the payload length and SHA-256), then an ``.npz`` payload holding the
parameter arrays.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
from dataclasses import dataclass

import numpy as np

from .env import WalkEnv
from .errors import CheckpointError
from .policy import PARAM_NAMES, PolicyParams

FORMAT_VERSION = 1
MAGIC = b"PKGX-CKPT v1\n"
_MAGIC_RE = re.compile(rb"^PKGX-CKPT v(\d+)\n")


@dataclass
class Checkpoint:
    params: PolicyParams
    train_step: int
    tau: float
    val_mrr: float
    config: dict
    env_meta: dict
    version: int = FORMAT_VERSION


def env_signature(env: WalkEnv) -> dict:
    h = hashlib.sha256()
    for name in env.kg.entities:
        h.update(name.encode("utf-8") + b"\0")
    h.update(b"\1")
    for name in env.relation_names:
        h.update(name.encode("utf-8") + b"\0")
    return {
        "t_max": env.t_max,
        "inverse_edges": env.inverse_edges,
        "num_entities": env.kg.num_entities,
        "num_action_relations": env.num_action_relations,
        "vocab_sha256": h.hexdigest(),
    }


def check_env(ckpt: Checkpoint, env: WalkEnv) -> None:
    sig = env_signature(env)
    if sig != ckpt.env_meta:
        diff = {k: (ckpt.env_meta.get(k), v) for k, v in sig.items() if ckpt.env_meta.get(k) != v}
        raise CheckpointError(f"checkpoint was trained on a different graph/environment: {diff}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **ckpt.params.arrays())
    payload = buf.getvalue()
    meta = {
        "train_step": ckpt.train_step,
        "tau": ckpt.tau,
        "val_mrr": ckpt.val_mrr,
        "encoder": ckpt.params.encoder,
        "config": ckpt.config,
        "env": ckpt.env_meta,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + header + b"\n" + payload


def from_bytes(blob: bytes) -> Checkpoint:
    m = _MAGIC_RE.match(blob[:32])
    if m is None:
        raise CheckpointError("not a PKGX-CKPT file")
    version = int(m.group(1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format v{version} is not supported by this reader (v{FORMAT_VERSION})")
    rest = blob[m.end():]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError("truncated checkpoint header")
    try:
        meta = json.loads(rest[:nl].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = rest[nl + 1 :]
    if len(payload) != meta.get("payload_bytes"):
        raise CheckpointError(
            f"truncated or padded checkpoint: payload {len(payload)} bytes, expected {meta.get('payload_bytes')}"
        )
    if hashlib.sha256(payload).hexdigest() != meta.get("payload_sha256"):
        raise CheckpointError("checkpoint payload checksum mismatch")
    with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in PARAM_NAMES}
    params = PolicyParams(**arrays, encoder=meta["encoder"])
    return Checkpoint(params, meta["train_step"], meta["tau"], meta["val_mrr"], meta["config"], meta["env"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)
