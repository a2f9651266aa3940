import json
import math
from pathlib import Path

import numpy as np
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import ValidationError
from tenacity import Retrying
from tenacity import retry_if_exception_type
from tenacity import stop_after_attempt

from embedding_mbo.core.errors import DegenerateRangeError
from embedding_mbo.core.errors import DomainError
from embedding_mbo.core.errors import EmptyInputError
from embedding_mbo.core.errors import EmptySubTaskError
from embedding_mbo.core.errors import InsufficientDataError
from embedding_mbo.core.errors import ParseError
from embedding_mbo.core.errors import SchemaError
from embedding_mbo.core.models import OfflineDataset
from embedding_mbo.core.models import SubTaskPartition
from embedding_mbo.core.models import Trajectory
from embedding_mbo.core.models import TransitionBatch
from embedding_mbo.core.settings import DEFAULT_RESAMPLE_CONFIG
from embedding_mbo.core.settings import ResampleConfig
from embedding_mbo.core.settings import logger

DATASET_FORMAT = "drop-traj"
DATASET_VERSION = 1


class DatasetHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str
    version: int
    state_dim: int
    action_dim: int
    env_name: str | None = None


class TrajectoryRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    observations: list[list[float]]
    actions: list[list[float]]
    rewards: list[float]
    terminals: list[bool]
    policy: str | None = None


def compute_return(traj: Trajectory) -> float:
    """Undiscounted sum of rewards of one episode."""
    if len(traj) == 0:
        raise EmptyInputError("cannot compute the return of an empty trajectory")
    return float(np.sum(traj.rewards))


def _require_nonempty(dataset: OfflineDataset) -> None:
    if len(dataset) == 0:
        raise EmptyInputError("the offline dataset holds no trajectories")


def _check_counts(n_subtasks: int, max_size: int) -> None:
    if n_subtasks < 1 or max_size < 1:
        raise DomainError(f"N and M must be >= 1, got N={n_subtasks}, M={max_size}")


def rank_order(dataset: OfflineDataset) -> np.ndarray:
    """Trajectory indices by descending return, ties by ascending index."""
    returns = np.array([compute_return(traj) for traj in dataset.trajectories])
    return np.lexsort((np.arange(len(returns)), -returns))


def decompose_rank(dataset: OfflineDataset, n_subtasks: int, max_size: int) -> SubTaskPartition:
    """Slice the return-ranked trajectories into N consecutive groups of M.

    Groups past the end of the data are left short or empty; trajectories
    beyond N*M are discarded.
    """
    _require_nonempty(dataset)
    _check_counts(n_subtasks, max_size)
    order = rank_order(dataset).tolist()
    subsets = [order[i * max_size : (i + 1) * max_size] for i in range(n_subtasks)]
    if len(order) < n_subtasks * max_size:
        logger.warning(
            f"Rank decomposition ran out of trajectories: {len(order)} < N*M = {n_subtasks * max_size}"
        )
    return SubTaskPartition(n_subtasks=n_subtasks, max_size=max_size, subsets=subsets, rule="rank")


def quantization_bins(returns: np.ndarray, n_subtasks: int) -> np.ndarray:
    """Bin index of every return over N equal-width bins of (R_min, R_max].

    A return equal to R_min falls in bin 0.
    """
    low, high = float(returns.min()), float(returns.max())
    if high == low:
        raise DegenerateRangeError(f"all returns equal {low}; quantization needs a range")
    width = (high - low) / n_subtasks
    bins = np.ceil((returns - low) / width).astype(int) - 1
    return np.clip(bins, 0, n_subtasks - 1)


def decompose_quantize(
    dataset: OfflineDataset, n_subtasks: int, max_size: int, seed: int
) -> SubTaskPartition:
    """Quantize returns into N bins and sample at most M trajectories from each."""
    _require_nonempty(dataset)
    _check_counts(n_subtasks, max_size)
    bins = quantization_bins(dataset.returns(), n_subtasks)
    rng = np.random.default_rng(seed)
    subsets = []
    for index in range(n_subtasks):
        members = np.flatnonzero(bins == index)
        if len(members) > max_size:
            members = np.sort(rng.choice(members, size=max_size, replace=False))
        subsets.append(members.tolist())
    return SubTaskPartition(
        n_subtasks=n_subtasks, max_size=max_size, subsets=subsets, rule="quantization"
    )


def decompose_random(
    dataset: OfflineDataset, n_subtasks: int, max_size: int, seed: int
) -> SubTaskPartition:
    """N disjoint groups of M trajectories drawn without replacement."""
    _require_nonempty(dataset)
    _check_counts(n_subtasks, max_size)
    if n_subtasks * max_size > len(dataset):
        raise InsufficientDataError(
            f"N*M = {n_subtasks * max_size} exceeds the {len(dataset)} available trajectories"
        )
    rng = np.random.default_rng(seed)
    drawn = rng.permutation(len(dataset))[: n_subtasks * max_size]
    subsets = drawn.reshape(n_subtasks, max_size).tolist()
    return SubTaskPartition(n_subtasks=n_subtasks, max_size=max_size, subsets=subsets, rule="random")


def decompose(
    dataset: OfflineDataset, rule: str, n_subtasks: int, max_size: int, seed: int = 0
) -> SubTaskPartition:
    """Dispatch to one of the three decomposition rules by name."""
    if rule == "rank":
        partition = decompose_rank(dataset, n_subtasks, max_size)
    elif rule == "quantization":
        partition = decompose_quantize(dataset, n_subtasks, max_size, seed)
    elif rule == "random":
        partition = decompose_random(dataset, n_subtasks, max_size, seed)
    else:
        raise DomainError(f"unknown decomposition rule: {rule}")
    sizes = [len(subset) for subset in partition.subsets]
    logger.info(f"Decomposed {len(dataset)} trajectories with rule={rule} into sizes {sizes}")
    return partition


def filter_top_fraction(dataset: OfflineDataset, fraction: float) -> OfflineDataset:
    """Keep the ceil(fraction * |D|) highest-return trajectories, best first."""
    _require_nonempty(dataset)
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must lie in (0, 1], got {fraction}")
    keep = math.ceil(round(fraction * len(dataset), 9))
    return dataset.subset(rank_order(dataset)[:keep].tolist())


class SubTaskSampler:
    """Draws (sub-task, transition batch) pairs from a partitioned dataset.

    Each sub-task's transitions are stacked once; rows that cannot be
    bootstrapped (a non-terminal last step with no recorded next action) are
    left out.
    """

    def __init__(
        self,
        partition: SubTaskPartition,
        dataset: OfflineDataset,
        resample_config: ResampleConfig | None = None,
    ):
        partition.check_indices(len(dataset))
        self.partition = partition
        self.resample_config = resample_config or DEFAULT_RESAMPLE_CONFIG
        self._pools: list[TransitionBatch] = []
        for subset in partition.subsets:
            stacked = dataset.stacked(list(subset))
            self._pools.append(stacked.take(np.flatnonzero(stacked.bootstrappable)))

    def pool(self, n: int) -> TransitionBatch:
        return self._pools[n]

    def _draw(self, batch_size: int, rng: np.random.Generator) -> tuple[int, TransitionBatch]:
        n = int(rng.integers(self.partition.n_subtasks))
        pool = self._pools[n]
        if len(pool) == 0:
            logger.debug(f"Sub-task {n} holds no transitions, resampling")
            raise EmptySubTaskError(f"sub-task {n} holds no transitions")
        rows = rng.integers(len(pool), size=batch_size)
        return n, pool.take(rows)

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[int, TransitionBatch]:
        attempts = self.resample_config.attempts or self.partition.n_subtasks
        retrying = Retrying(
            stop=stop_after_attempt(attempts),
            retry=retry_if_exception_type(EmptySubTaskError),
            reraise=True,
        )
        return retrying(self._draw, batch_size, rng)


def sample_batch(
    partition: SubTaskPartition,
    dataset: OfflineDataset,
    batch_size: int,
    seed_stream: np.random.Generator,
) -> tuple[int, TransitionBatch]:
    """Pick a sub-task uniformly, then `batch_size` of its transitions with replacement.

    Raises:
        EmptySubTaskError: If N consecutive draws land on empty sub-tasks.
    """
    return SubTaskSampler(partition, dataset).sample(batch_size, seed_stream)


def save_dataset(dataset: OfflineDataset, path: str | Path) -> None:
    """Write the header line followed by one JSON object per trajectory."""
    destination = Path(path)
    destination.parent.mkdir(parents=True, exist_ok=True)
    header = DatasetHeader(
        format=DATASET_FORMAT,
        version=DATASET_VERSION,
        state_dim=dataset.state_dim,
        action_dim=dataset.action_dim,
        env_name=dataset.env_name,
    )
    with destination.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header.model_dump(exclude_none=True)) + "\n")
        for traj in dataset.trajectories:
            f.write(json.dumps(traj.to_record()) + "\n")
    logger.info(f"Saved {len(dataset)} trajectories to: {destination}")


def load_dataset(path: str | Path) -> OfflineDataset:
    """Read a dataset file written by `save_dataset`.

    Raises:
        FileNotFoundError: If the file does not exist.
        ParseError: On a malformed header or record (with its line number).
        SchemaError: When a record's dimensions disagree with the header.
    """
    source = Path(path)
    if not source.is_file():
        error_message = f"Unable to find the dataset in the specified location: {source}"
        logger.error(error_message)
        raise FileNotFoundError(error_message)

    with source.open("r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty dataset file", line=1)

    try:
        header = DatasetHeader.model_validate_json(lines[0])
    except ValidationError as e:
        raise ParseError(f"malformed header: {e}", line=1) from e
    if header.format != DATASET_FORMAT or header.version != DATASET_VERSION:
        raise ParseError(f"unsupported format {header.format!r} v{header.version}", line=1)

    trajectories = []
    for line_number, line in enumerate(lines[1:], start=2):
        try:
            record = TrajectoryRecord.model_validate_json(line)
        except ValidationError as e:
            raise ParseError(f"malformed trajectory record: {e}", line=line_number) from e
        try:
            traj = Trajectory(**record.model_dump())
        except ValidationError as e:
            raise ParseError(f"inconsistent trajectory record: {e}", line=line_number) from e
        if len(traj) == 0:
            raise ParseError("empty trajectory record", line=line_number)
        if traj.state_dim != header.state_dim or traj.action_dim != header.action_dim:
            raise SchemaError(
                f"dims ({traj.state_dim}, {traj.action_dim}) disagree with header"
                f" ({header.state_dim}, {header.action_dim})",
                line=line_number,
            )
        trajectories.append(traj)

    dataset = OfflineDataset(
        trajectories=trajectories,
        state_dim=header.state_dim,
        action_dim=header.action_dim,
        env_name=header.env_name,
    )
    logger.info(f"Loaded {len(dataset)} trajectories from: {source}")
    return dataset
