"""
Поиск наихудшего априорного распределения на конечной сетке параметров.

Байесовский риск вогнут по априорному распределению, а при фиксированной
стратегии линеен по нему, поэтому шаг условного градиента (Франка-Вулфа)
идёт к вершине сетки с максимальным сожалением текущей байесовской
стратегии. Каждая итерация даёт двустороннюю оценку минимаксного риска.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from bandit_app.exceptions import DomainError
from bandit_app.services.core_model import ParameterPoint, Prior
from bandit_app.services.dp_solver import Recursion, SolverConfig, solve
from bandit_app.services.evaluation import evaluate_grid


logger = logging.getLogger(__name__)


@dataclass
class GameResult:
    worst_prior: Prior
    lower_bound: float
    upper_bound: float
    iterations: int
    history: list[tuple[int, float, float]] = field(default_factory=list)
    grid: tuple[ParameterPoint, ...] = ()
    strategy_mixture: list[float] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.upper_bound - self.lower_bound

    def to_dict(self) -> dict:
        weights = dict(zip(self.worst_prior.points, self.worst_prior.weights.tolist()))
        return {
            "grid": [list(point.as_tuple()) for point in self.grid],
            "weights": [weights.get(point, 0.0) for point in self.grid],
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "iterations": self.iterations,
            "history": [
                {"iteration": k, "lower_bound": lower, "upper_bound": upper}
                for k, lower, upper in self.history
            ],
        }


def find_worst_prior(
    grid: Sequence[ParameterPoint],
    config: SolverConfig,
    max_iterations: int,
    gap_tol: float,
    recursion: Recursion | str = Recursion.V2,
    workers: int = 1,
) -> GameResult:
    """
    Восхождение условным градиентом по μ ↦ R_T(μ) с шагом 2/(k+2).

    Нижняя граница: лучший байесовский риск среди посещённых μ_k.
    Верхняя: худшее по сетке сожаление смеси байесовских стратегий
    σ_0 … σ_k (веса смеси обновляются тем же шагом), либо отдельной σ_k,
    если она лучше.
    """
    grid = tuple(grid)
    if not grid:
        raise DomainError("Сетка параметров пуста")
    if len(set(grid)) != len(grid):
        raise DomainError("Точки сетки должны быть различны")
    if max_iterations < 1:
        raise DomainError(f"max_iterations={max_iterations!r} должно быть ≥ 1")
    if gap_tol < 0:
        raise DomainError(f"gap_tol={gap_tol!r} должно быть неотрицательным")

    size = len(grid)
    weights = np.full(size, 1.0 / size)
    mixed_regret = np.zeros(size)
    mixture: list[float] = []
    best_lower, best_upper = -np.inf, np.inf
    best_prior = Prior.uniform(grid)
    history: list[tuple[int, float, float]] = []
    config.ensure_covers(best_prior)

    for k in range(max_iterations):
        prior = Prior.on_grid(grid, weights.tolist())
        solution = solve(prior, config, recursion)
        regrets = evaluate_grid(solution.strategy, grid, config, workers)

        gamma = 2.0 / (k + 2.0)
        mixed_regret = (1.0 - gamma) * mixed_regret + gamma * regrets
        mixture = [w * (1.0 - gamma) for w in mixture] + [gamma]

        if solution.root_risk > best_lower:
            best_lower = solution.root_risk
            best_prior = prior
        best_upper = min(best_upper, float(mixed_regret.max()), float(regrets.max()))
        history.append((k + 1, best_lower, best_upper))
        logger.debug("Итерация %s: R_T(μ)=%.9g, граница сверху %.9g", k + 1, solution.root_risk, best_upper)

        if best_upper - best_lower <= gap_tol:
            break
        target = int(np.argmax(regrets))
        weights = (1.0 - gamma) * weights
        weights[target] += gamma

    logger.info(
        "✅ Минимакс: %.9g ≤ R^M ≤ %.9g за %s итераций (сетка из %s точек)",
        best_lower, best_upper, len(history), size,
    )
    return GameResult(
        worst_prior=best_prior,
        lower_bound=float(best_lower),
        upper_bound=float(best_upper),
        iterations=len(history),
        history=history,
        grid=grid,
        strategy_mixture=mixture,
    )
