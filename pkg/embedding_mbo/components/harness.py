"""Training, evaluation and fine-tuning commands.

Every command takes a validated `RunConfig` and writes its outputs under
`config.output_dir`:

    dataset.jsonl          generated data (gen-data, or train without data.path)
    checkpoints/ckpt_XX.bin
    train_log.csv
    metrics.csv            one row per evaluated episode
    metrics_summary.txt    (mean, std) per rule
    finetune_ckpt.csv / finetune_embed.csv
    fbc_metrics.csv / distill_metrics.csv
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from jinja2 import Template
from pydantic import BaseModel

from embedding_mbo.components.approximator import gaussian_log_prob
from embedding_mbo.components.behavior import ContextualPolicy
from embedding_mbo.components.behavior import CvaeEncoder
from embedding_mbo.components.behavior import TaskEmbedding
from embedding_mbo.components.behavior import bc_update
from embedding_mbo.components.behavior import cvae_update
from embedding_mbo.components.checkpoints import load_checkpoint
from embedding_mbo.components.checkpoints import save_checkpoint
from embedding_mbo.components.dataset import SubTaskSampler
from embedding_mbo.components.dataset import decompose
from embedding_mbo.components.dataset import filter_top_fraction
from embedding_mbo.components.dataset import load_dataset
from embedding_mbo.components.dataset import rank_order
from embedding_mbo.components.dataset import save_dataset
from embedding_mbo.components.environments import generate_dataset
from embedding_mbo.components.environments import make_env
from embedding_mbo.components.environments import reference_scores
from embedding_mbo.components.environments import scripted_policy
from embedding_mbo.components.inference import DropModels
from embedding_mbo.components.inference import distill_policy
from embedding_mbo.components.inference import rollout
from embedding_mbo.components.inference import rollout_policy
from embedding_mbo.components.score import ConservativeScoreModel
from embedding_mbo.components.score import set_conservatism
from embedding_mbo.components.score import train_step
from embedding_mbo.core.errors import DegenerateRangeError
from embedding_mbo.core.errors import EmptyInputError
from embedding_mbo.core.errors import NumericalError
from embedding_mbo.core.errors import UnregisteredEnvError
from embedding_mbo.core.interfaces import BaseEnv
from embedding_mbo.core.models import EpisodeRecord
from embedding_mbo.core.models import InferenceConfig
from embedding_mbo.core.models import MetricsRow
from embedding_mbo.core.models import OfflineDataset
from embedding_mbo.core.models import TransitionBatch
from embedding_mbo.core.settings import RunConfig
from embedding_mbo.core.settings import logger

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TEMPLATES_DIR = os.path.join(ROOT_DIR, "core/templates")
EVAL_SUMMARY_TEMPLATE_PATH = os.path.join(TEMPLATES_DIR, "eval_summary.txt")

with open(EVAL_SUMMARY_TEMPLATE_PATH) as f:
    EVAL_SUMMARY_TEMPLATE = Template(f.read())

TRAIN_LOG_COLUMNS = ["step", "bc_loss", "td_loss", "gap", "lam"]
FINETUNE_COLUMNS = ["checkpoint_id", "k", "selection_rule", "evaluation_rule", "return"]
METRICS_COLUMNS = [
    "seed",
    "training_step",
    "checkpoint_id",
    "rule",
    "episode",
    "return",
    "normalized_return",
    "inference_calls",
    "wall_ms",
]


class TrainResult(BaseModel):
    checkpoints: list[Path]
    log_path: Path
    final_step: int


class FinetuneSelection(BaseModel):
    checkpoint_id: int
    k: int | None = None
    episode_return: float
    truncated: bool = False


def normalized_return(env_name: str, raw: float) -> float:
    """100 * (raw - random) / (expert - random) with the registered references.

    Raises:
        UnregisteredEnvError: If the environment has no references.
        DegenerateRangeError: If the two references coincide.
    """
    random_ref, expert_ref = reference_scores(env_name)
    if expert_ref == random_ref:
        raise DegenerateRangeError(f"{env_name}: random and expert references are both {random_ref}")
    return 100.0 * (raw - random_ref) / (expert_ref - random_ref)


def _maybe_normalized(env_name: str, raw: float) -> float | None:
    try:
        return normalized_return(env_name, raw)
    except UnregisteredEnvError:
        return None


def run_dir(config: RunConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_env(config: RunConfig, name: str | None = None) -> BaseEnv:
    env_name = name or config.data.env
    if env_name == "chain":
        return make_env("chain", n_states=config.data.chain_states)
    return make_env(env_name)


def generate_from_config(config: RunConfig) -> OfflineDataset:
    env = build_env(config, config.data.generator)
    policies = [
        (scripted_policy(env.name, name, config.data.noise_std), config.data.episodes_per_policy)
        for name in config.data.policies
    ]
    return generate_dataset(env, policies, seed=config.train.seed)


def prepare_dataset(config: RunConfig) -> OfflineDataset:
    """Load `data.path` when it exists, otherwise generate and save the scripted dataset."""
    path = Path(config.data.path) if config.data.path else run_dir(config) / "dataset.jsonl"
    if path.is_file():
        return load_dataset(path)
    dataset = generate_from_config(config)
    save_dataset(dataset, path)
    return dataset


def cmd_gen_data(config: RunConfig) -> Path:
    path = Path(config.data.path) if config.data.path else run_dir(config) / "dataset.jsonl"
    save_dataset(generate_from_config(config), path)
    return path


def init_models(config: RunConfig, dataset: OfflineDataset) -> DropModels:
    seed, net = config.train.seed, config.network
    if config.decomposition.rule == "cvae":
        embedding = CvaeEncoder.create(
            dataset.state_dim, dataset.action_dim, net.embedding_dim, net.hidden_dim, seed, config.behavior.lr
        )
    else:
        embedding = TaskEmbedding.create(
            config.decomposition.n_subtasks, net.embedding_dim, net.hidden_dim, seed, config.behavior.lr
        )
    policy = ContextualPolicy.create(
        dataset.state_dim,
        dataset.action_dim,
        net.embedding_dim,
        net.hidden_dim,
        net.feature_dim,
        seed + 10,
        config.behavior.lr,
    )
    settings = config.score
    score = ConservativeScoreModel.create(
        dataset.state_dim,
        dataset.action_dim,
        net.embedding_dim,
        net.hidden_dim,
        net.feature_dim,
        seed + 20,
        settings.lr,
        gamma=settings.gamma,
        tau=settings.tau,
        eta=settings.eta,
        lam=settings.lambda_init,
        lambda_lr=settings.lambda_lr,
        n_ood=settings.n_ood,
        sample_actions=settings.sample_actions,
    )
    score = set_conservatism(score, settings.conservative)
    return DropModels(embedding=embedding, policy=policy, score=score)


def checkpoint_steps(total_steps: int, count: int) -> list[int]:
    """Evenly spaced steps after which a checkpoint is written; [0] for an empty run."""
    if total_steps == 0:
        return [0]
    return sorted({max(1, round(total_steps * (i + 1) / count)) for i in range(count)})


def cvae_anchors(encoder: CvaeEncoder, dataset: OfflineDataset, count: int) -> np.ndarray:
    """Mean encodings of the `count` highest-return trajectories."""
    anchors = []
    for index in rank_order(dataset)[:count]:
        traj = dataset.trajectories[int(index)]
        if len(traj):
            mean, _ = encoder.distribution(traj.observations, traj.actions)
            anchors.append(mean.mean(axis=0))
    if not anchors:
        raise EmptyInputError("no non-empty trajectories to anchor the embedding search")
    return np.stack(anchors)


class _WindowLog:
    def __init__(self):
        self.rows: list[dict] = []
        self._window: list[tuple[float, float, float, float]] = []

    def add(self, bc: float, td: float, gap: float, lam: float) -> None:
        self._window.append((bc, td, gap, lam))

    def flush(self, step: int) -> None:
        if not self._window:
            return
        bc, td, gap, _ = np.mean(np.array(self._window), axis=0)
        lam = self._window[-1][3]
        self.rows.append({"step": step, "bc_loss": bc, "td_loss": td, "gap": gap, "lam": lam})
        logger.info(f"step {step}: bc_loss={bc:.4f} td_loss={td:.4f} gap={gap:.4f} lam={lam:.4f}")
        self._window = []

    def write(self, path: Path) -> None:
        pd.DataFrame(self.rows, columns=TRAIN_LOG_COLUMNS).to_csv(
            path, index=False, lineterminator="\n", encoding="utf-8"
        )


def _sample_rows(pool: TransitionBatch, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
    return pool.take(rng.integers(len(pool), size=batch_size))


def train(config: RunConfig, dataset: OfflineDataset) -> TrainResult:
    """Alternate behavior and score updates on sampled sub-tasks, checkpointing on a fixed cadence.

    Raises:
        NumericalError: On a non-finite loss; checkpoints already written and
            the training log so far are kept.
    """
    out = run_dir(config)
    checkpoint_dir = out / "checkpoints"
    log_path = out / "train_log.csv"
    models = init_models(config, dataset)
    cvae = config.decomposition.rule == "cvae"
    rng = np.random.default_rng(config.train.seed)

    if cvae:
        stacked = dataset.stacked()
        pool = stacked.take(np.flatnonzero(stacked.bootstrappable))
        if len(pool) == 0:
            raise EmptyInputError("the dataset holds no usable transitions")
    else:
        decomposition = config.decomposition
        partition = decompose(
            dataset,
            decomposition.rule,
            decomposition.n_subtasks,
            decomposition.trajectories_per_subtask,
            config.train.seed,
        )
        sampler = SubTaskSampler(partition, dataset)

    targets = checkpoint_steps(config.train.steps, config.train.checkpoints)
    written: list[Path] = []
    log = _WindowLog()

    def save(step: int, current: DropModels) -> Path:
        if cvae:
            anchors = cvae_anchors(current.embedding, dataset, config.decomposition.n_subtasks)
            current = current.model_copy(update={"embedding": current.embedding.with_anchors(anchors)})
        return save_checkpoint(checkpoint_dir / f"ckpt_{len(written):02d}.bin", current, step)

    if targets == [0]:
        written.append(save(0, models))

    embedding, policy, score = models.embedding, models.policy, models.score
    batch_size = config.train.batch_size
    try:
        for step in range(1, config.train.steps + 1):
            if cvae:
                batch, n = _sample_rows(pool, batch_size, rng), None
                embedding, policy, losses = cvae_update(embedding, policy, batch, rng)
                bc_loss = -losses.elbo
            else:
                n, batch = sampler.sample(batch_size, rng)
                embedding, policy, bc_loss = bc_update(embedding, policy, batch, n)
            score, embedding, score_losses = train_step(score, embedding, policy, batch, n, rng)
            log.add(bc_loss, score_losses.td, score_losses.gap, score_losses.lam)

            if step % config.train.log_every == 0 or step == config.train.steps:
                log.flush(step)
            if step in targets:
                written.append(save(step, DropModels(embedding=embedding, policy=policy, score=score)))
    except NumericalError:
        logger.error(f"Training aborted after {len(written)} checkpoints", exc_info=True)
        log.write(log_path)
        raise

    log.write(log_path)
    return TrainResult(checkpoints=written, log_path=log_path, final_step=config.train.steps)


def cmd_train(config: RunConfig) -> TrainResult:
    return train(config, prepare_dataset(config))


def list_checkpoints(config: RunConfig) -> list[Path]:
    return sorted((Path(config.output_dir) / "checkpoints").glob("ckpt_*.bin"))


def last_checkpoints(config: RunConfig, paths: list[Path] | None = None) -> tuple[list[tuple[int, Path]], list[Path]]:
    """The last T existing checkpoints as (checkpoint id, path), and the requested paths that are missing."""
    requested = list_checkpoints(config) if paths is None else [Path(p) for p in paths]
    missing = [path for path in requested if not path.is_file()]
    for path in missing:
        logger.error(f"Checkpoint not found, skipping: {path}")
    existing = [(index, path) for index, path in enumerate(requested) if path.is_file()]
    if not existing:
        raise EmptyInputError(f"no checkpoints to evaluate under {config.output_dir}")
    return existing[-config.eval.last_checkpoints :], missing


def episode_seed(seed: int, episode: int) -> int:
    return seed * 10_000 + episode


def _timed(run: Callable[[], EpisodeRecord]) -> tuple[EpisodeRecord, float]:
    start = time.perf_counter()
    record = run()
    return record, 1000.0 * (time.perf_counter() - start)


def evaluate_models(
    config: RunConfig,
    checkpoints: list[tuple[int, int, DropModels]],
    rules: list[str],
    env_factory: Callable[[], BaseEnv] | None = None,
) -> list[MetricsRow]:
    """One row per (checkpoint, rule, episode), in that order.

    Args:
        checkpoints: (checkpoint id, training step, models) triples.
    """
    env_factory = env_factory or (lambda: build_env(config))
    env_name = env_factory().name
    seed = config.train.seed
    tasks = [
        (checkpoint_id, step, models, rule, episode)
        for checkpoint_id, step, models in checkpoints
        for rule in rules
        for episode in range(config.eval.episodes)
    ]

    def run(task) -> MetricsRow:
        checkpoint_id, step, models, rule, episode = task
        cfg = config.inference.model_copy(update={"rule": rule})
        record, wall_ms = _timed(
            lambda: rollout(env_factory(), models, cfg, episode_seed(seed, episode), config.eval.max_steps)
        )
        return MetricsRow(
            seed=seed,
            training_step=step,
            checkpoint_id=checkpoint_id,
            rule=rule,
            episode=episode,
            episode_return=record.episode_return,
            normalized_return=_maybe_normalized(env_name, record.episode_return),
            inference_calls=record.inference_calls,
            wall_ms=wall_ms,
        )

    if config.eval.workers > 1:
        with ThreadPoolExecutor(max_workers=config.eval.workers) as pool:
            rows = list(pool.map(run, tasks))
    else:
        rows = [run(task) for task in tasks]
    return rows


def write_metrics(rows: list[MetricsRow], path: Path) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump(by_alias=True) for row in rows], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    logger.info(f"Wrote {len(frame)} metrics rows to: {path}")
    return frame


def summarize(frame: pd.DataFrame) -> list[dict]:
    """Per-rule count, mean and (population) std of the return."""
    summary = []
    for rule, group in frame.groupby("rule", sort=False):
        normalized = group["normalized_return"].dropna()
        summary.append(
            {
                "rule": rule,
                "count": len(group),
                "mean": float(group["return"].mean()),
                "std": float(group["return"].std(ddof=0)),
                "normalized_mean": float(normalized.mean()) if len(normalized) else None,
            }
        )
    return summary


def write_summary(frame: pd.DataFrame, path: Path, config: RunConfig, checkpoints: int, missing: list[Path]) -> None:
    text = EVAL_SUMMARY_TEMPLATE.render(
        env=config.data.env,
        seed=config.train.seed,
        checkpoints=checkpoints,
        episodes=config.eval.episodes,
        rows=summarize(frame),
        missing=[str(p) for p in missing],
    )
    path.write_text(text, encoding="utf-8")


def cmd_eval(config: RunConfig, paths: list[Path] | None = None) -> tuple[Path, list[Path]]:
    """Evaluate the last T checkpoints under every configured rule.

    Returns:
        tuple: (metrics CSV path, checkpoints that were requested but missing)
    """
    selected, missing = last_checkpoints(config, paths)
    loaded = []
    for checkpoint_id, path in selected:
        models, step = load_checkpoint(path)
        loaded.append((checkpoint_id, step, models))
    rows = evaluate_models(config, loaded, list(config.eval.rules))
    out = run_dir(config)
    frame = write_metrics(rows, out / "metrics.csv")
    write_summary(frame, out / "metrics_summary.txt", config, len(loaded), missing)
    return out / "metrics.csv", missing


def _finetune_row(checkpoint_id: int, k: int | None, selection: str, evaluation: str, value: float) -> dict:
    return {
        "checkpoint_id": checkpoint_id,
        "k": k,
        "selection_rule": selection,
        "evaluation_rule": evaluation,
        "return": value,
    }


def select_checkpoint(
    env: BaseEnv,
    checkpoints: list[tuple[int, DropModels]],
    cfg: InferenceConfig,
    seed: int = 0,
    max_steps: int | None = None,
) -> tuple[FinetuneSelection, list[dict]]:
    """One `best`-rule episode per checkpoint; the highest return wins, earlier on ties."""
    if not checkpoints:
        raise EmptyInputError("checkpoint selection needs at least one checkpoint")
    best_cfg = cfg.model_copy(update={"rule": "best"})
    rows, returns, truncated = [], [], []
    for checkpoint_id, models in checkpoints:
        record = rollout(env, models, best_cfg, seed, max_steps)
        returns.append(record.episode_return)
        truncated.append(record.status == "truncated")
        rows.append(_finetune_row(checkpoint_id, None, "best", cfg.rule, record.episode_return))
    chosen = int(np.argmax(returns))
    selection = FinetuneSelection(
        checkpoint_id=checkpoints[chosen][0], episode_return=returns[chosen], truncated=any(truncated)
    )
    logger.info(f"Selected checkpoint {selection.checkpoint_id} with return {selection.episode_return:.4f}")
    return selection, rows


def select_ascent_steps(
    env: BaseEnv,
    checkpoints: list[tuple[int, DropModels]],
    cfg: InferenceConfig,
    k_max: int,
    seed: int = 0,
    max_steps: int | None = None,
) -> tuple[FinetuneSelection, list[dict]]:
    """Sweep checkpoints x K in 1..k_max with one episode each; ties go to the earlier pair."""
    if not checkpoints:
        raise EmptyInputError("ascent-step selection needs at least one checkpoint")
    rows, candidates, truncated = [], [], False
    for checkpoint_id, models in checkpoints:
        for k in range(1, k_max + 1):
            record = rollout(env, models, cfg.model_copy(update={"K": k}), seed, max_steps)
            truncated = truncated or record.status == "truncated"
            candidates.append((checkpoint_id, k, record.episode_return))
            rows.append(_finetune_row(checkpoint_id, k, cfg.rule, cfg.rule, record.episode_return))
    logger.info(f"Ascent-step sweep used {len(rows)} episodes ({len(checkpoints)} checkpoints x {k_max})")
    chosen = int(np.argmax([value for _, _, value in candidates]))
    checkpoint_id, k, value = candidates[chosen]
    logger.info(f"Selected checkpoint {checkpoint_id} with K={k}, return {value:.4f}")
    return FinetuneSelection(checkpoint_id=checkpoint_id, k=k, episode_return=value, truncated=truncated), rows


def _load_selected(config: RunConfig) -> list[tuple[int, DropModels]]:
    selected, _ = last_checkpoints(config)
    return [(checkpoint_id, load_checkpoint(path)[0]) for checkpoint_id, path in selected]


def _write_finetune(rows: list[dict], path: Path) -> None:
    pd.DataFrame(rows, columns=FINETUNE_COLUMNS).to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def cmd_finetune_checkpoint(config: RunConfig, env: BaseEnv | None = None) -> FinetuneSelection:
    env = env or build_env(config)
    selection, rows = select_checkpoint(
        env, _load_selected(config), config.inference, config.train.seed, config.eval.max_steps
    )
    _write_finetune(rows, run_dir(config) / "finetune_ckpt.csv")
    return selection


def cmd_finetune_embedding(
    config: RunConfig, env: BaseEnv | None = None, k_max: int | None = None
) -> FinetuneSelection:
    env = env or build_env(config)
    cfg = config.inference.model_copy(update={"rule": config.finetune.rule})
    selection, rows = select_ascent_steps(
        env,
        _load_selected(config),
        cfg,
        k_max or config.finetune.k_max,
        config.train.seed,
        config.eval.max_steps,
    )
    _write_finetune(rows, run_dir(config) / "finetune_embed.csv")
    return selection


def fit_plain_bc(
    dataset: OfflineDataset,
    steps: int,
    batch_size: int,
    hidden_dim: int = 64,
    feature_dim: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> ContextualPolicy:
    """Maximum-likelihood Gaussian policy without an embedding input."""
    stacked = dataset.stacked()
    states, actions = stacked.states, stacked.actions
    if len(states) == 0:
        raise EmptyInputError("plain behavior cloning needs at least one transition")
    policy = ContextualPolicy.create(dataset.state_dim, dataset.action_dim, 0, hidden_dim, feature_dim, seed, lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        rows = rng.integers(len(states), size=batch_size)
        mean, log_std, cache = policy.distribution_cached(states[rows], np.zeros((batch_size, 0)))
        values, d_mean, d_log_std = gaussian_log_prob(mean, log_std, actions[rows])
        if not np.all(np.isfinite(values)):
            raise NumericalError("non-finite behavior-cloning loss")
        d_encoder, d_head, _ = policy.backward(cache, -d_mean / batch_size, -d_log_std / batch_size)
        policy = policy.apply_gradient(d_encoder, d_head)
    return policy


def _evaluate_plain(
    config: RunConfig, act: Callable[[np.ndarray], np.ndarray], rule: str, step: int
) -> list[MetricsRow]:
    rows = []
    for episode in range(config.eval.episodes):
        env = build_env(config)
        record, wall_ms = _timed(
            lambda: rollout_policy(env, act, episode_seed(config.train.seed, episode), config.eval.max_steps)
        )
        rows.append(
            MetricsRow(
                seed=config.train.seed,
                training_step=step,
                checkpoint_id=0,
                rule=rule,
                episode=episode,
                episode_return=record.episode_return,
                normalized_return=_maybe_normalized(env.name, record.episode_return),
                inference_calls=0,
                wall_ms=wall_ms,
            )
        )
    return rows


def cmd_baseline_fbc(config: RunConfig) -> Path:
    """Behavior cloning on the top `fbc.fraction` of trajectories by return."""
    filtered = filter_top_fraction(prepare_dataset(config), config.fbc.fraction)
    logger.info(f"F-BC keeps {len(filtered)} trajectories")
    policy = fit_plain_bc(
        filtered,
        config.fbc.steps,
        config.train.batch_size,
        config.network.hidden_dim,
        config.network.feature_dim,
        config.behavior.lr,
        config.train.seed,
    )
    no_z = np.zeros((1, 0))
    rows = _evaluate_plain(config, lambda s: policy.mean_action(s[None, :], no_z)[0], "fbc", config.fbc.steps)
    path = run_dir(config) / "fbc_metrics.csv"
    write_metrics(rows, path)
    return path


def cmd_distill(config: RunConfig) -> Path:
    """Distill the last checkpoint into a plain policy and evaluate it."""
    selected, _ = last_checkpoints(config)
    models, step = load_checkpoint(selected[-1][1])
    distilled, _ = distill_policy(
        models,
        prepare_dataset(config),
        config.inference,
        config.distill.steps,
        config.distill.lr,
        config.distill.batch_size,
        config.network.hidden_dim,
        config.train.seed,
    )
    rows = _evaluate_plain(config, distilled, "distilled", step)
    path = run_dir(config) / "distill_metrics.csv"
    write_metrics(rows, path)
    return path
