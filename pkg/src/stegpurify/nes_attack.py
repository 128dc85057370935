"""Black-box NES attack that pushes revealed output away from its original value."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import joblib
import torch

from stegpurify._util import OracleError
from stegpurify.image_core import check_image
from stegpurify.schema import SchemaConfig, is_int, is_positive

logger = logging.getLogger(__name__)

Oracle = Callable[[torch.Tensor], torch.Tensor]
Objective = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NesSpec(SchemaConfig):
    """Antithetic NES settings; the query budget is population x iterations."""

    population: int = 50
    sigma: float = 0.001
    step_size: float = 1.0 / 255.0
    iterations: int = 100
    budget: float = 16.0 / 255.0
    seed: int = 0

    SCHEMA = {
        "population": lambda v: is_int(v) and v >= 2 and v % 2 == 0,
        "sigma": is_positive,
        "step_size": is_positive,
        "iterations": lambda v: is_int(v) and v >= 0,
        "budget": is_positive,
        "seed": is_int,
    }


def estimate_nes_gradient(
    objective: Objective,
    x: torch.Tensor,
    sigma: float,
    population: int,
    generator: torch.Generator,
) -> torch.Tensor:
    """Antithetic estimate g = 1/(sigma*P) * sum_i f(x + sigma*d_i) d_i.

    ``objective`` maps a batch to one value per image. Samples come in pairs (d, -d);
    query points are clipped to [0, 1].
    """
    grad = torch.zeros_like(x)
    for _ in range(population // 2):
        delta = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(x.device)
        queries = torch.cat([x + sigma * delta, x - sigma * delta]).clamp(0.0, 1.0)
        values = objective(queries)
        plus, minus = values[: x.shape[0]], values[x.shape[0] :]
        grad += (plus - minus).view(-1, *([1] * (x.dim() - 1))) * delta
    return grad / (sigma * population)


def nes_attack(
    spec: NesSpec,
    c_prime: torch.Tensor,
    oracle: Oracle,
    partial_path: Path | None = None,
) -> torch.Tensor:
    """Maximise ||oracle(x) - oracle(c')||_2 inside the l-inf budget ball and [0, 1]."""
    check_image(c_prime, "container")
    generator = torch.Generator().manual_seed(spec.seed)
    x = c_prime.detach().clone()
    if spec.iterations == 0:
        return x

    with torch.no_grad():
        reference = oracle(c_prime)

        def objective(batch: torch.Tensor) -> torch.Tensor:
            revealed = oracle(batch)
            repeats = batch.shape[0] // reference.shape[0]
            return (revealed - reference.repeat(repeats, 1, 1, 1)).flatten(1).norm(dim=1)

        lower = (c_prime - spec.budget).clamp(0.0, 1.0)
        upper = (c_prime + spec.budget).clamp(0.0, 1.0)
        for iteration in range(spec.iterations):
            try:
                grad = estimate_nes_gradient(objective, x, spec.sigma, spec.population, generator)
            except Exception as exc:  # pylint: disable=broad-exception-caught
                if partial_path is not None:
                    joblib.dump({"iteration": iteration, "partial": x.cpu().numpy()}, partial_path)
                raise OracleError(f"Oracle failed at NES iteration {iteration}: {exc}", x) from exc
            rms = grad.flatten(1).pow(2).mean(dim=1).sqrt().clamp_min(1e-12)
            x = x + spec.step_size * grad / rms.view(-1, 1, 1, 1)
            x = torch.max(torch.min(x, upper), lower)
            if (iteration + 1) % 10 == 0:
                logger.debug(
                    "NES iteration %d: distance %.4f", iteration + 1, float(objective(x).mean())
                )
    return x
