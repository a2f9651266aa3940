from embedding_mbo.components.environments import chain_env
from embedding_mbo.components.environments import twin_peaks_env
from embedding_mbo.components.inference import DropModels
from embedding_mbo.components.inference import rollout
from embedding_mbo.components.inference import select_embedding
from embedding_mbo.core.settings import RunConfig
from embedding_mbo.core.settings import load_config

__all__ = [
    "DropModels",
    "RunConfig",
    "chain_env",
    "load_config",
    "rollout",
    "select_embedding",
    "twin_peaks_env",
]
