"""
Точная и Монте-Карло оценка сожаления L_T(σ, θ) для стратегий на решётке.

Точная оценка: обратная индукция по фиксированной стратегии при
вырожденном апостериорном распределении. Монте-Карло: повтор r всегда
использует собственный поток ``SeedSequence(seed, spawn_key=(r,))``,
поэтому результат не зависит от числа процессов.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import poisson

from bandit_app.exceptions import DomainError, StrategyError
from bandit_app.services.core_model import (
    ParameterPoint,
    Prior,
    check_arm,
    lattice_posterior,
    poisson_shift_matrix,
)
from bandit_app.services.dp_solver import SolverConfig, StrategyTable


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegretEstimate:
    mean: float
    std_error: float
    replications: int
    seed: int
    clamp_rate: float = 0.0


@dataclass(frozen=True)
class IntervalRecord:
    interval: int
    action: int
    increment: int


@dataclass(frozen=True)
class Trajectory:
    records: tuple[IntervalRecord, ...]
    total1: int
    total2: int

    def __post_init__(self):
        if any(r.increment < 0 for r in self.records):
            raise DomainError("Приращения счётчиков должны быть неотрицательными")
        for arm, total in ((1, self.total1), (2, self.total2)):
            if sum(r.increment for r in self.records if r.action == arm) != total:
                raise DomainError(f"Итог по действию {arm} не равен сумме приращений")


# ---------- ПОСТРОЕНИЕ СТРАТЕГИЙ ----------

def _non_terminal_nodes(config: SolverConfig):
    for n in range(config.steps_N):
        for n1 in range(n + 1):
            yield n1, n - n1


def constant_strategy(arm: int, config: SolverConfig) -> StrategyTable:
    arm = check_arm(arm)
    shape = (config.xmax + 1, config.xmax + 1)
    actions = {key: np.full(shape, arm, dtype=np.int8) for key in _non_terminal_nodes(config)}
    return StrategyTable(None, config, actions)


def greedy_strategy(prior: Prior, config: SolverConfig) -> StrategyTable:
    """Выбор действия с большим апостериорным средним интенсивности (при ничьей действие 1)."""
    actions = {}
    for n1, n2 in _non_terminal_nodes(config):
        post, possible, _ = lattice_posterior(prior, config.xmax, config.time(n1), config.time(n2))
        mean1 = np.einsum("k,kab->ab", prior.rates1, post)
        mean2 = np.einsum("k,kab->ab", prior.rates2, post)
        actions[(n1, n2)] = np.where(possible, np.where(mean1 >= mean2, 1, 2), 0).astype(np.int8)
    return StrategyTable(None, config, actions)


# ---------- ТОЧНАЯ ОЦЕНКА ----------

def _check_coverage(strategy: StrategyTable, config: SolverConfig) -> None:
    own = strategy.config
    if (
        own.steps_N != config.steps_N
        or own.xmax != config.xmax
        or not math.isclose(own.horizon_T, config.horizon_T, rel_tol=1e-12)
    ):
        raise StrategyError(
            f"Стратегия построена для T={own.horizon_T}, N={own.steps_N}, xmax={own.xmax}, "
            f"а оценка запрошена для T={config.horizon_T}, N={config.steps_N}, xmax={config.xmax}"
        )
    for n1, n2 in _non_terminal_nodes(config):
        if (n1, n2) not in strategy.actions:
            raise StrategyError(f"В стратегии нет узла (n1={n1}, n2={n2})", state=(n1, 0, n2, 0))


def _check_reachable(strategy: StrategyTable, theta: ParameterPoint, config: SolverConfig) -> None:
    """Прямой проход вероятностей посещения: неопределённое действие в достижимом состоянии считается ошибкой."""
    size = config.xmax + 1
    shift1 = poisson_shift_matrix(config.xmax, config.delta, theta.lambda1)
    shift2 = poisson_shift_matrix(config.xmax, config.delta, theta.lambda2)
    layer = {0: np.zeros((size, size))}
    layer[0][0, 0] = 1.0
    for n in range(config.steps_N):
        following = {n1: np.zeros((size, size)) for n1 in range(n + 2)}
        for n1 in range(n + 1):
            n2 = n - n1
            mass = layer[n1]
            actions = strategy.node(n1, n2)
            stuck = (actions == 0) & (mass > 0)
            if stuck.any():
                x1, x2 = (int(v) for v in np.argwhere(stuck)[0])
                raise StrategyError(
                    f"Стратегия не определена в достижимом состоянии (n1={n1}, x1={x1}, n2={n2}, x2={x2})",
                    state=(n1, x1, n2, x2),
                )
            following[n1 + 1] += shift1.T @ np.where(actions == 1, mass, 0.0)
            following[n1] += np.where(actions == 2, mass, 0.0) @ shift2
        layer = following


def regret_truncation_budget(theta: ParameterPoint, config: SolverConfig) -> float:
    gap = abs(theta.lambda1 - theta.lambda2)
    return 2.0 * config.horizon_T * gap * float(poisson.sf(config.xmax, theta.best_rate * config.horizon_T))


def evaluate_exact(strategy: StrategyTable, theta: ParameterPoint, config: SolverConfig) -> float:
    """
    Точное L_T(σ, θ) с точностью до бюджета усечения по xmax
    (см. ``regret_truncation_budget``). Если xmax не покрывает λmax·T для θ,
    поднимается ConfigError.
    """
    _check_coverage(strategy, config)
    config.ensure_rate_covered(theta.best_rate)
    if any((strategy.node(n1, n2) == 0).any() for n1, n2 in _non_terminal_nodes(config)):
        _check_reachable(strategy, theta, config)

    size = config.xmax + 1
    delta = config.delta
    shift1 = poisson_shift_matrix(config.xmax, delta, theta.lambda1)
    shift2 = poisson_shift_matrix(config.xmax, delta, theta.lambda2)
    loss1 = theta.gap(1) * delta
    loss2 = theta.gap(2) * delta

    layer = {n1: np.zeros((size, size)) for n1 in range(config.steps_N + 1)}
    for n in range(config.steps_N - 1, -1, -1):
        current = {}
        for n1 in range(n + 1):
            actions = strategy.node(n1, n - n1)
            value1 = loss1 + shift1 @ layer[n1 + 1]
            value2 = loss2 + layer[n1] @ shift2.T
            current[n1] = np.where(actions == 1, value1, np.where(actions == 2, value2, 0.0))
        layer = current

    logger.debug("L_T(σ, θ=%s) вычислено", theta.as_tuple())
    return float(layer[0][0, 0])


def evaluate_grid(
    strategy: StrategyTable, points: Sequence[ParameterPoint], config: SolverConfig, workers: int = 1
) -> np.ndarray:
    """Точные сожаления для набора θ; оценки независимы и могут идти в потоках."""
    if workers <= 1:
        return np.array([evaluate_exact(strategy, point, config) for point in points])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(lambda point: evaluate_exact(strategy, point, config), points)))


def bayes_average(strategy: StrategyTable, prior: Prior, config: SolverConfig, workers: int = 1) -> float:
    """Σ_k w_k·L_T(σ, θ_k), байесовское среднее сожаления стратегии."""
    regrets = evaluate_grid(strategy, prior.points, config, workers)
    return math.fsum((prior.weights * regrets).tolist())


# ---------- МОНТЕ-КАРЛО ----------

def replication_rng(seed: int, replication: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replication,)))


def _play(actions, rates, config: SolverConfig, rng: np.random.Generator, records: list | None = None):
    """Одна траектория; возвращает (X₁(T), X₂(T), число усечённых обращений к таблице)."""
    n1 = n2 = x1 = x2 = clamps = 0
    xmax = config.xmax
    for interval in range(config.steps_N):
        if x1 > xmax or x2 > xmax:
            clamps += 1
        action = int(actions[(n1, n2)][min(x1, xmax), min(x2, xmax)])
        if action == 0:
            raise StrategyError(
                f"Стратегия не определена в посещённом состоянии (n1={n1}, x1={x1}, n2={n2}, x2={x2})",
                state=(n1, x1, n2, x2),
            )
        increment = int(rng.poisson(rates[action - 1] * config.delta))
        if action == 1:
            x1 += increment
            n1 += 1
        else:
            x2 += increment
            n2 += 1
        if records is not None:
            records.append(IntervalRecord(interval, action, increment))
    return x1, x2, clamps


def _run_chunk(actions, points, weights, config, seed, start, stop):
    samples = np.empty(stop - start)
    clamps = 0
    for offset, replication in enumerate(range(start, stop)):
        rng = replication_rng(seed, replication)
        if weights is None:
            rate1, rate2 = points[0]
        else:
            rate1, rate2 = points[int(rng.choice(len(points), p=weights))]
        x1, x2, clamped = _play(actions, (rate1, rate2), config, rng)
        samples[offset] = config.horizon_T * max(rate1, rate2) - (x1 + x2)
        clamps += clamped
    return samples, clamps


def _estimate(strategy, points, weights, config, replications, seed, workers) -> RegretEstimate:
    if isinstance(replications, bool) or int(replications) != replications or replications < 1:
        raise DomainError(f"replications={replications!r} должно быть положительным целым")
    if int(seed) != seed or seed < 0:
        raise DomainError(f"seed={seed!r} должен быть неотрицательным целым")
    _check_coverage(strategy, config)

    bounds = np.linspace(0, replications, max(1, workers) + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    args = [(strategy.actions, points, weights, config, seed, a, b) for a, b in chunks]
    if workers <= 1:
        results = [_run_chunk(*arg) for arg in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, *zip(*args)))

    samples = np.concatenate([chunk for chunk, _ in results])
    clamps = sum(count for _, count in results)
    std_error = float(samples.std(ddof=1) / math.sqrt(replications)) if replications > 1 else 0.0
    estimate = RegretEstimate(
        mean=float(samples.mean()),
        std_error=std_error,
        replications=int(replications),
        seed=int(seed),
        clamp_rate=clamps / (replications * config.steps_N),
    )
    if clamps:
        logger.info("Усечение счётчиков при обращении к стратегии: доля %.3e", estimate.clamp_rate)
    logger.info(
        "✅ Монте-Карло: среднее сожаление %.6g ± %.2g (%s повторов, seed=%s)",
        estimate.mean, estimate.std_error, replications, seed,
    )
    return estimate


def simulate(
    strategy: StrategyTable,
    theta: ParameterPoint,
    config: SolverConfig,
    replications: int,
    seed: int,
    workers: int = 1,
) -> RegretEstimate:
    return _estimate(strategy, [theta.as_tuple()], None, config, replications, seed, workers)


def simulate_prior(
    strategy: StrategyTable,
    prior: Prior,
    config: SolverConfig,
    replications: int,
    seed: int,
    workers: int = 1,
) -> RegretEstimate:
    """θ разыгрывается из априорного распределения в начале каждого повтора."""
    points = [point.as_tuple() for point in prior.points]
    return _estimate(strategy, points, prior.weights, config, replications, seed, workers)


def sample_trajectory(
    strategy: StrategyTable, theta: ParameterPoint, config: SolverConfig, seed: int, replication: int = 0
) -> Trajectory:
    _check_coverage(strategy, config)
    records: list[IntervalRecord] = []
    x1, x2, _ = _play(strategy.actions, theta.as_tuple(), config, replication_rng(seed, replication), records)
    return Trajectory(tuple(records), x1, x2)
