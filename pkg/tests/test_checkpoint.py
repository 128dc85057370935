"""Tests for joblib checkpoints."""

from pathlib import Path

import joblib
import pytest
import torch
from torch import nn

from stegpurify._util import CheckpointError
from stegpurify.checkpoint import (
    FORMAT_VERSION,
    load_checkpoint,
    module_state,
    restore_module,
    save_checkpoint,
)


@pytest.fixture(name="saved")
def saved_fixture(tmp_path: Path) -> Path:
    """A diagnostic checkpoint holding one linear layer."""
    torch.manual_seed(0)
    return save_checkpoint(
        tmp_path / "ckpt" / "layer.joblib",
        "diagnostic",
        {"features": 3},
        {"layer": nn.Linear(3, 2)},
        config={"seed": 0},
        log={"step": [1]},
    )


def test_round_trip_restores_weights(saved: Path) -> None:
    """State written by save_checkpoint loads back into a fresh module."""
    payload = load_checkpoint(saved, "diagnostic")
    assert payload["format_version"] == FORMAT_VERSION
    assert payload["hparams"] == {"features": 3}
    layer = restore_module(nn.Linear(3, 2), payload["state"]["layer"])
    torch.manual_seed(0)
    original = nn.Linear(3, 2)
    assert torch.equal(layer.weight, original.weight)
    assert module_state(layer).keys() == {"weight", "bias"}


def test_wrong_kind(saved: Path) -> None:
    """Loading as another kind is refused."""
    with pytest.raises(CheckpointError, match="expected hiding_pair"):
        load_checkpoint(saved, "hiding_pair")


def test_unknown_kind_is_not_written(tmp_path: Path) -> None:
    """Only known kinds are saved."""
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.joblib", "weights", {}, {})


@pytest.mark.parametrize(
    "content",
    [
        b"\x00\x01not a pickle",
        None,
        {"kind": "diagnostic"},
        {"format_version": 99, "kind": "diagnostic"},
    ],
)
def test_unreadable_or_foreign_files(tmp_path: Path, content) -> None:
    """Missing, corrupt, foreign and future-format files raise CheckpointError."""
    path = tmp_path / "bad.joblib"
    if isinstance(content, bytes):
        path.write_bytes(content)
    elif isinstance(content, dict):
        joblib.dump(content, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "diagnostic")


def test_restore_rejects_mismatched_state(saved: Path) -> None:
    """State of another shape does not load."""
    payload = load_checkpoint(saved, "diagnostic")
    with pytest.raises(CheckpointError):
        restore_module(nn.Linear(4, 2), payload["state"]["layer"])


def test_missing_class_reference(tmp_path: Path) -> None:
    """A pickle naming a module that is not installed raises CheckpointError."""
    path = tmp_path / "stale.joblib"
    path.write_bytes(b"cstegpurify_removed_module\nOldModel\n.")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, "weights")


def test_loader_errors_are_wrapped(saved: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    """Any loader failure surfaces as CheckpointError."""

    def broken(_path):
        raise KeyError("state_dict")

    monkeypatch.setattr(joblib, "load", broken)
    with pytest.raises(CheckpointError, match="Unreadable"):
        load_checkpoint(saved, "diagnostic")
