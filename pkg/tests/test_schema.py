"""Unit tests for SchemaConfig and its validators.

Covers defaulting, validation and serialization.
"""

from dataclasses import dataclass
from typing import Tuple

import pytest

from stegpurify._util import ConfigurationError
from stegpurify.schema import (
    SchemaConfig,
    is_int,
    is_non_negative,
    is_positive,
    is_probability,
    is_range,
    one_of,
)


@dataclass(frozen=True)
class Sample(SchemaConfig):
    """Small config used only by these tests."""

    kind: str = "a"
    rate: float = 0.5
    steps: int = 3
    window: Tuple[int, int] = (1, 4)

    SCHEMA = {
        "kind": one_of("a", "b"),
        "rate": is_probability,
        "steps": is_int,
        "window": is_range,
    }


def test_from_dict_defaults():
    """Test that missing fields are correctly defaulted."""
    assert Sample.from_dict({}) == Sample()


def test_lists_become_tuples():
    """Test that list values from TOML are frozen into tuples."""
    config = Sample.from_dict({"window": [2, 8]})
    assert config.window == (2, 8)
    assert config.to_dict()["window"] == [2, 8]


@pytest.mark.parametrize(
    "raw",
    [{"kind": "c"}, {"rate": 1.5}, {"steps": True}, {"window": [5, 1]}, {"colour": "red"}],
)
def test_invalid_values_are_refused(raw):
    """Test that invalid values and unknown keys raise ConfigurationError."""
    with pytest.raises(ConfigurationError):
        Sample.from_dict(raw)


def test_round_trip():
    """Test that to_dict output rebuilds an equal config."""
    config = Sample(kind="b", rate=0.0, steps=10, window=(0, 0))
    assert Sample.from_dict(config.to_dict()) == config


def test_validators():
    """Test the shared validators on edge values."""
    assert is_positive(0.1) and not is_positive(0) and not is_positive(True)
    assert is_non_negative(0) and not is_non_negative(-1)
    assert is_probability(1) and not is_probability(1.01)
    assert is_int(3) and not is_int(3.0)
    assert not is_range((1,)) and is_range([1, 1])
