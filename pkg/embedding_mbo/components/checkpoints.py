"""Single-file checkpoints of the embedding, policy and score model.

Layout: the 8-byte magic, one version byte, a little-endian uint32 header
length, the JSON header, then the data blocks the header points at. Network
blocks are `dump_params` output followed by the two Adam moment vectors;
array blocks are raw little-endian float64.
"""

import json
import os
import struct
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel
from pydantic import ValidationError

from embedding_mbo.components.approximator import PARAMS_FORMAT_VERSION
from embedding_mbo.components.approximator import Network
from embedding_mbo.components.approximator import dump_params
from embedding_mbo.components.approximator import load_params
from embedding_mbo.components.behavior import BEHAVIOR_VERSION
from embedding_mbo.components.behavior import ContextualPolicy
from embedding_mbo.components.behavior import CvaeEncoder
from embedding_mbo.components.behavior import TaskEmbedding
from embedding_mbo.components.inference import DropModels
from embedding_mbo.components.score import SCORE_VERSION
from embedding_mbo.components.score import ConservativeScoreModel
from embedding_mbo.core.errors import ParseError
from embedding_mbo.core.models import AdamState
from embedding_mbo.core.settings import logger

MAGIC = b"DROPCKPT"
CHECKPOINT_VERSION = 1
MODULE_VERSIONS = {"approximator": PARAMS_FORMAT_VERSION, "behavior": BEHAVIOR_VERSION, "score": SCORE_VERSION}
_PREAMBLE = struct.Struct("<8sBI")
_REQUIRED_BLOCKS = (
    ("embedding", Network),
    ("policy.encoder", Network),
    ("policy.head", Network),
    ("score.encoder", Network),
    ("score.head", Network),
    ("score.target_encoder", np.ndarray),
    ("score.target_head", np.ndarray),
)


class AdamHeader(BaseModel):
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


class BlockEntry(BaseModel):
    name: str
    offset: int
    length: int
    adam: AdamHeader | None = None
    shape: list[int] | None = None


class ScoreHeader(BaseModel):
    action_dim: int
    gamma: float
    tau: float
    eta: float
    lam: float
    lambda_lr: float
    n_ood: int
    conservative: bool
    sample_actions: bool


class CheckpointHeader(BaseModel):
    step: int
    versions: dict[str, int]
    embedding: Literal["task", "cvae"]
    n_subtasks: int | None = None
    state_dim: int
    action_dim: int
    z_dim: int
    score: ScoreHeader
    blocks: list[BlockEntry]


def _network_block(network: Network) -> bytes:
    optim = network.optim
    return (
        dump_params(network.spec, network.params)
        + np.asarray(optim.m, dtype="<f8").tobytes()
        + np.asarray(optim.v, dtype="<f8").tobytes()
    )


def _read_network(blob: bytes, adam: AdamHeader) -> Network:
    spec, params, used = load_params(blob)
    size = spec.n_params
    if len(blob) != used + 16 * size:
        raise ParseError("optimizer moments do not match the parameter block")
    m = np.frombuffer(blob, dtype="<f8", count=size, offset=used).astype(np.float64)
    v = np.frombuffer(blob, dtype="<f8", count=size, offset=used + 8 * size).astype(np.float64)
    return Network(spec=spec, params=params, optim=AdamState(m=m, v=v, **adam.model_dump()))


def _blocks(models: DropModels) -> list[tuple[str, Network | np.ndarray]]:
    blocks: list[tuple[str, Network | np.ndarray]] = [
        ("embedding", models.embedding.network),
        ("policy.encoder", models.policy.encoder),
        ("policy.head", models.policy.head),
        ("score.encoder", models.score.encoder),
        ("score.head", models.score.head),
        ("score.target_encoder", models.score.target_encoder),
        ("score.target_head", models.score.target_head),
    ]
    if isinstance(models.embedding, CvaeEncoder) and models.embedding.anchors is not None:
        blocks.append(("embedding.anchors", models.embedding.anchors))
    return blocks


def checkpoint_bytes(models: DropModels, step: int) -> bytes:
    """Serialize models and training step into checkpoint bytes."""
    entries, payload = [], bytearray()
    for name, block in _blocks(models):
        if isinstance(block, Network):
            data = _network_block(block)
            adam = AdamHeader(**block.optim.model_dump(include={"step", "lr", "beta1", "beta2", "eps"}))
            entries.append(BlockEntry(name=name, offset=len(payload), length=len(data), adam=adam))
        else:
            data = np.asarray(block, dtype="<f8").tobytes()
            entries.append(BlockEntry(name=name, offset=len(payload), length=len(data), shape=list(block.shape)))
        payload.extend(data)

    score = models.score
    header = CheckpointHeader(
        step=step,
        versions=MODULE_VERSIONS,
        embedding="cvae" if isinstance(models.embedding, CvaeEncoder) else "task",
        n_subtasks=getattr(models.embedding, "n_subtasks", None),
        state_dim=score.state_dim,
        action_dim=score.action_dim,
        z_dim=models.embedding.dim,
        score=ScoreHeader(**score.model_dump(include=set(ScoreHeader.model_fields))),
        blocks=entries,
    )
    header_bytes = json.dumps(header.model_dump(), sort_keys=True).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + bytes(payload)


def save_checkpoint(path: str | Path, models: DropModels, step: int) -> Path:
    """Write a checkpoint through a temporary file and an atomic rename."""
    destination = Path(path)
    destination.parent.mkdir(parents=True, exist_ok=True)
    temporary = destination.with_name(destination.name + ".tmp")
    temporary.write_bytes(checkpoint_bytes(models, step))
    os.replace(temporary, destination)
    logger.info(f"Saved checkpoint at step {step} to: {destination}")
    return destination


def parse_checkpoint(data: bytes) -> tuple[DropModels, int]:
    """Inverse of `checkpoint_bytes`.

    Raises:
        ParseError: On a bad magic, version, header or block table.
    """
    if len(data) < _PREAMBLE.size:
        raise ParseError("checkpoint too short")
    magic, version, header_length = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ParseError("not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    start = _PREAMBLE.size + header_length
    if len(data) < start:
        raise ParseError("truncated checkpoint header")
    try:
        header = CheckpointHeader.model_validate_json(data[_PREAMBLE.size : start])
    except ValidationError as e:
        raise ParseError(f"corrupt checkpoint header: {e}") from e
    stale = sorted(name for name, version in MODULE_VERSIONS.items() if header.versions.get(name) != version)
    if stale:
        raise ParseError(f"checkpoint written by incompatible module versions: {stale}")

    blocks: dict[str, Network | np.ndarray] = {}
    for entry in header.blocks:
        begin, end = start + entry.offset, start + entry.offset + entry.length
        if end > len(data):
            raise ParseError(f"checkpoint block {entry.name!r} runs past the end of the file")
        blob = data[begin:end]
        if entry.adam is not None:
            blocks[entry.name] = _read_network(blob, entry.adam)
            continue
        try:
            blocks[entry.name] = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(entry.shape or -1)
        except ValueError as e:
            raise ParseError(f"checkpoint block {entry.name!r} has the wrong size") from e

    for name, kind in _REQUIRED_BLOCKS:
        if not isinstance(blocks.get(name), kind):
            raise ParseError(f"checkpoint block {name!r} is missing or malformed")

    try:
        return _assemble(header, blocks), header.step
    except ValidationError as e:
        raise ParseError(f"checkpoint blocks do not fit together: {e}") from e


def _assemble(header: CheckpointHeader, blocks: dict[str, Network | np.ndarray]) -> DropModels:
    if header.embedding == "task":
        embedding = TaskEmbedding(n_subtasks=header.n_subtasks, network=blocks["embedding"])
    else:
        embedding = CvaeEncoder(network=blocks["embedding"], anchors=blocks.get("embedding.anchors"))
    policy = ContextualPolicy(
        encoder=blocks["policy.encoder"], head=blocks["policy.head"], action_dim=header.action_dim
    )
    score = ConservativeScoreModel(
        encoder=blocks["score.encoder"],
        head=blocks["score.head"],
        target_encoder=blocks["score.target_encoder"],
        target_head=blocks["score.target_head"],
        **header.score.model_dump(),
    )
    return DropModels(embedding=embedding, policy=policy, score=score)


def load_checkpoint(path: str | Path) -> tuple[DropModels, int]:
    source = Path(path)
    if not source.is_file():
        error_message = f"Unable to find the checkpoint in the specified location: {source}"
        logger.error(error_message)
        raise FileNotFoundError(error_message)
    return parse_checkpoint(source.read_bytes())
