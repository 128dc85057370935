"""Desk-scale acceptance checks against an already trained experiment.

Set STEGPURIFY_ACCEPTANCE_DIR to the output directory of a finished
``stegpurify train-hiding`` / ``train-ebra`` run (it must contain config.json)
and run ``pytest -m slow``.
"""

import json
import os
from pathlib import Path
from typing import Dict, Tuple

import pytest
import torch

from stegpurify._util import select_device
from stegpurify.ebra import EbraEnsemble, erase, load_ebra_ensemble
from stegpurify.experiment_config import ExperimentConfig, SchemeSpec
from stegpurify.harness import (
    GridResult,
    RunLayout,
    SchemeEval,
    benchmark_timing,
    ebra_params,
    load_eval_covers,
    prepare_scheme,
    run_grid,
    run_k_sweep,
)
from stegpurify.hiding import make_secret_batch, reveal
from stegpurify.metrics import MetricReportRow, psnr, vif
from stegpurify.probes import (
    REDUNDANCY_THRESHOLD,
    locality_probe,
    receptive_radius,
    redundancy_probe,
)

ACCEPTANCE_DIR = os.environ.get("STEGPURIFY_ACCEPTANCE_DIR")

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not ACCEPTANCE_DIR, reason="STEGPURIFY_ACCEPTANCE_DIR is not set"),
]


@pytest.fixture(name="experiment", scope="module")
def experiment_fixture() -> ExperimentConfig:
    """Configuration stored next to the trained checkpoints."""
    root = Path(str(ACCEPTANCE_DIR))
    raw = json.loads((root / "config.json").read_text(encoding="utf-8"))
    raw["output_dir"] = str(root)
    return ExperimentConfig.from_dict(raw)


@pytest.fixture(name="grid", scope="module")
def grid_fixture(experiment: ExperimentConfig) -> GridResult:
    """The full attack grid over the trained schemes."""
    return run_grid(experiment, select_device())


@pytest.fixture(name="device", scope="module")
def device_fixture() -> torch.device:
    """Device every check runs on."""
    return select_device()


def scheme_with_noise(experiment: ExperimentConfig, kind: str) -> SchemeSpec:
    """First scheme trained with the given noise layer kind."""
    for scheme in experiment.schemes:
        if scheme.train.noise.kind == kind:
            return scheme
    pytest.skip(f"experiment has no scheme trained with {kind} noise")


@pytest.fixture(name="basic", scope="module")
def basic_fixture(
    experiment: ExperimentConfig, device: torch.device
) -> Tuple[SchemeEval, torch.Tensor]:
    """Held-out containers of the scheme trained without noise, and their secrets."""
    scheme = scheme_with_noise(experiment, "none")
    layout = RunLayout(experiment.output_root())
    prepared = prepare_scheme(experiment, layout, scheme, load_eval_covers(experiment), device)
    secrets = make_secret_batch(
        prepared.covers, scheme.secret_channels, experiment.metrics.binarize_secrets
    )
    return prepared, secrets


@pytest.fixture(name="ensemble", scope="module")
def ensemble_fixture(experiment: ExperimentConfig, device: torch.device) -> EbraEnsemble:
    """Ensemble used by the first ebra attack."""
    entry = next((a for a in experiment.attacks if a.kind == "ebra"), None)
    if entry is None:
        pytest.skip("experiment has no ebra attack")
    k, d, _ = ebra_params(entry, experiment)
    return load_ebra_ensemble(RunLayout(experiment.output_root()).ebra(k, d), device)


def rows_by_kind(
    experiment: ExperimentConfig, grid: GridResult, scheme: str | None = None
) -> Dict[str, MetricReportRow]:
    """Rows of one scheme (default the first) keyed by attack kind (first attack of each kind)."""
    scheme = scheme or experiment.schemes[0].name
    kinds = {a.name: a.kind for a in experiment.attacks}
    rows: Dict[str, MetricReportRow] = {}
    for row in grid.rows:
        if row.scheme == scheme:
            rows.setdefault(kinds[row.attack], row)
    return rows


def test_ebra_removes_the_secret(experiment: ExperimentConfig, grid: GridResult) -> None:
    """Containers stay close while the revealed secret is destroyed."""
    ebra = rows_by_kind(experiment, grid)["ebra"]
    assert ebra.psnr_c >= 25.0
    assert ebra.vif_s < 0.1
    assert ebra.psnr_s <= 12.0
    assert 0.4 <= ebra.ber_binarized <= 0.6


def test_ebra_has_the_lowest_secret_fidelity(
    experiment: ExperimentConfig, grid: GridResult
) -> None:
    """No other attack leaves less of the secret."""
    rows = rows_by_kind(experiment, grid)
    others = [row.vif_s for kind, row in rows.items() if kind not in ("identity", "ebra")]
    assert rows["ebra"].vif_s <= min(others, default=1.0)


def test_auxiliary_generators_improve_the_container(
    experiment: ExperimentConfig, grid: GridResult
) -> None:
    """Without edge and colour guidance the container degrades but the secret stays gone."""
    rows = rows_by_kind(experiment, grid)
    if "ebra_dagger" not in rows:
        pytest.skip("experiment has no ebra_dagger attack")
    assert rows["ebra_dagger"].psnr_c < rows["ebra"].psnr_c
    assert abs(rows["ebra_dagger"].vif_s - rows["ebra"].vif_s) <= 0.05


def test_batched_passes_are_faster(experiment: ExperimentConfig) -> None:
    """Repairing every pass in one batch at least halves the time per image."""
    device = select_device()
    if device.type == "cpu":
        pytest.skip("timing ratio is measured on an accelerator")
    results = benchmark_timing(experiment, device)
    name = next(a.name for a in experiment.attacks if a.kind == "ebra")
    assert results[f"{name}[batched]"].mean_ms * 2 <= results[f"{name}[sequential]"].mean_ms


def test_trained_pair_hides_and_reveals(basic: Tuple[SchemeEval, torch.Tensor]) -> None:
    """Held-out containers stay close to their covers and reveal their secrets."""
    prepared, secrets = basic
    assert psnr(prepared.covers, prepared.containers) >= 30.0
    assert psnr(secrets, prepared.revealed) >= 28.0


def test_lattice_defeats_only_the_basic_pair(
    experiment: ExperimentConfig, grid: GridResult
) -> None:
    """Sparse pixel replacement wipes the basic secret; the GN-hardened one survives."""
    basic = rows_by_kind(experiment, grid, scheme_with_noise(experiment, "none").name)
    if "lattice" not in basic:
        pytest.skip("experiment has no lattice attack")
    hardened = rows_by_kind(experiment, grid, scheme_with_noise(experiment, "GN").name)
    assert basic["lattice"].vif_s < 0.1
    assert hardened["lattice"].vif_s >= 0.15


def test_ebra_defeats_the_hardened_pair(experiment: ExperimentConfig, grid: GridResult) -> None:
    """Noise hardening does not protect the secret from erase-and-repair."""
    hardened = rows_by_kind(experiment, grid, scheme_with_noise(experiment, "GN").name)
    assert hardened["ebra"].vif_s < 0.15


def test_revealing_is_local(basic: Tuple[SchemeEval, torch.Tensor]) -> None:
    """Zeroing a 16x16 window changes the revealed secret mostly around that window."""
    prepared, secrets = basic
    report = locality_probe(prepared.pair, prepared.covers[:8], secrets[:8], 16)
    assert report.ratio >= 5.0


def test_single_pixels_matter(basic: Tuple[SchemeEval, torch.Tensor]) -> None:
    """Zeroing one container pixel visibly changes revealed pixels within the receptive field."""
    prepared, _ = basic
    height, width = prepared.containers.shape[-2:]
    report = redundancy_probe(prepared.pair, prepared.containers[:1], (height // 2, width // 2))
    assert report.max_change > REDUNDANCY_THRESHOLD
    assert report.radius is not None and report.radius <= receptive_radius(prepared.pair)


def test_tile_size_barely_matters(experiment: ExperimentConfig, device: torch.device) -> None:
    """Secret fidelity after EBRA stays within 0.1 VIF across the swept tile sizes."""
    if len(experiment.ebra.k_values) < 2:
        pytest.skip("experiment sweeps fewer than two tile sizes")
    values = [point.vif_s for point in run_k_sweep(experiment, device=device)]
    assert max(values) - min(values) <= 0.1


def test_colour_map_carries_no_secret(
    basic: Tuple[SchemeEval, torch.Tensor], ensemble: EbraEnsemble
) -> None:
    """The coarse colour map alone reveals almost nothing."""
    if ensemble.color_generator is None:
        pytest.skip("ensemble was trained without auxiliary generators")
    prepared, _ = basic
    containers = prepared.containers[:32]
    with torch.no_grad():
        color_map, _ = ensemble.color_generator(containers)
    leaked = reveal(prepared.pair, color_map.clamp(0.0, 1.0))
    assert vif(prepared.revealed[:32], leaked) < 0.1


def test_erased_tiles_reveal_nothing(
    basic: Tuple[SchemeEval, torch.Tensor], ensemble: EbraEnsemble
) -> None:
    """Every pixel is erased once, and what the erased container reveals there is noise."""
    prepared, _ = basic
    containers = prepared.containers[:32]
    schedule = ensemble.schedule(*containers.shape[-2:])
    coverage = torch.zeros_like(containers[:, :1])
    assembled = torch.zeros_like(prepared.revealed[:32])
    for index in range(schedule.pass_count):
        mask, masked = erase(containers, schedule, index)
        coverage += mask
        assembled += mask * reveal(prepared.pair, masked)
    assert torch.equal(coverage, torch.ones_like(coverage))
    assert vif(prepared.revealed[:32], assembled) < 0.1
