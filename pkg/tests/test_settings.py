import pytest
from pydantic import ValidationError

from embedding_mbo.core.errors import ConfigError
from embedding_mbo.core.settings import ResampleConfig
from embedding_mbo.core.settings import load_config
from embedding_mbo.core.settings import parse_config_text


def test_defaults():
    config = load_config()
    assert config.data.env == "twin_peaks"
    assert config.data.policies == ["skill_a", "skill_b"]
    assert config.decomposition.rule == "rank"
    assert config.train.steps == 10_000
    assert config.eval.rules == ["best", "grad", "best_ada", "grad_ada"]
    assert config.eval.last_checkpoints == 6
    assert config.score.conservative


def test_parse_config_text():
    text = """
    # comment
    train.steps = 50
    score.eta=1.5
    output_dir = out
    """
    assert parse_config_text(text) == {"train": {"steps": "50"}, "score": {"eta": "1.5"}, "output_dir": "out"}


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("train.steps", "line 1"),
        ("a=1\n=2", "empty key"),
        ("output_dir=a\noutput_dir.x=b", "not a section"),
        ("train.steps=1\n\ntrain.steps=2", "line 3"),
    ],
)
def test_malformed_config_text(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config_text(text)


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "eval.rules = best, grad_ada\n"
        "score.conservative = false\n"
        "inference.K = 7\n"
        "data.policies = goal_seeking\n"
        "data.path = none\n"
    )
    config = load_config(path)
    assert config.eval.rules == ["best", "grad_ada"]
    assert not config.score.conservative
    assert config.inference.K == 7
    assert config.data.policies == ["goal_seeking"]
    assert config.data.path is None


def test_overrides_win_over_the_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.seed = 1\noutput_dir = from_file\n")
    config = load_config(path, {"train.seed": 5, "output_dir": None})
    assert config.train.seed == 5
    assert config.output_dir == "from_file"


@pytest.mark.parametrize(
    "overrides",
    [
        {"train.stepz": 3},
        {"score.gamma": 1.0},
        {"decomposition.rule": "kmeans"},
        {"eval.rules": "best,fastest"},
        {"data.generator": "none"},
    ],
)
def test_invalid_values(overrides):
    with pytest.raises(ConfigError):
        load_config(None, overrides)


def test_missing_files(tmp_path):
    with pytest.raises(ConfigError, match="Config file not found"):
        load_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigError, match="Dataset file not found"):
        load_config(None, {"data.generator": "none", "data.path": str(tmp_path / "nope.jsonl")})


def test_resample_attempts_must_be_positive():
    assert ResampleConfig().attempts is None
    with pytest.raises(ValidationError):
        ResampleConfig(attempts=0)
