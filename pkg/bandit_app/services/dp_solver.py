"""
Обратная индукция для байесовского риска на решётке (X₁, n₁Δ, X₂, n₂Δ).

Версия v1 работает с нормированным риском R и апостериорными весами,
версия v2 работает с ненормированным R̃ = R·μ(X₁, t₁, X₂, t₂) и весами
предсказательного перехода. В памяти одновременно держатся два соседних
временных слоя; полные таблицы сохраняются по запросу.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, NamedTuple

import numpy as np
from scipy.stats import poisson

from bandit_app.exceptions import ConfigError, DomainError
from bandit_app.services.core_model import (
    Prior,
    State,
    lattice_marginal,
    log_pmf_table,
    loss_from_log_joint,
    poisson_shift_matrix,
    posterior_from_log_joint,
    predictive_weight_matrix,
)


logger = logging.getLogger(__name__)

MARGINAL_SKIP = 1e-300


class Recursion(str, Enum):
    V1 = "v1"
    V2 = "v2"
    LINEARIZED = "linearized"


class TieRule(str, Enum):
    PREFER_ARM_1 = "prefer-arm-1"


@dataclass(frozen=True)
class SolverConfig:
    horizon_T: float
    steps_N: int
    xmax: int
    tail_eps: float = 1e-10
    tie_rule: TieRule = TieRule.PREFER_ARM_1
    stop_run: int = 5

    def __post_init__(self):
        if not math.isfinite(self.horizon_T) or self.horizon_T <= 0:
            raise ConfigError(f"horizon_T={self.horizon_T!r} должен быть положительным")
        if isinstance(self.steps_N, bool) or int(self.steps_N) != self.steps_N or self.steps_N < 1:
            raise ConfigError(f"steps_N={self.steps_N!r} должен быть положительным целым")
        if isinstance(self.xmax, bool) or int(self.xmax) != self.xmax or self.xmax < 1:
            raise ConfigError(f"xmax={self.xmax!r} должен быть целым ≥ 1")
        if not 0 < self.tail_eps < 1:
            raise ConfigError(f"tail_eps={self.tail_eps!r} должен лежать в (0, 1)")
        if int(self.stop_run) != self.stop_run or self.stop_run < 1:
            raise ConfigError(f"stop_run={self.stop_run!r} должен быть целым ≥ 1")
        try:
            tie_rule = TieRule(self.tie_rule)
        except ValueError as e:
            raise ConfigError(f"Неизвестное правило ничьей: {self.tie_rule!r}") from e
        object.__setattr__(self, "tie_rule", tie_rule)
        object.__setattr__(self, "steps_N", int(self.steps_N))
        object.__setattr__(self, "xmax", int(self.xmax))
        object.__setattr__(self, "horizon_T", float(self.horizon_T))

    @property
    def delta(self) -> float:
        return self.horizon_T / self.steps_N

    def time(self, n: int) -> float:
        return n * self.horizon_T / self.steps_N

    def truncation_tail(self, max_rate: float) -> float:
        """P(X > xmax) для X ~ Poisson(max_rate·T)."""
        return float(poisson.sf(self.xmax, max_rate * self.horizon_T))

    def ensure_rate_covered(self, max_rate: float) -> float:
        tail = self.truncation_tail(max_rate)
        if tail >= self.tail_eps:
            raise ConfigError(
                f"xmax={self.xmax} недостаточен: хвост Пуассона {tail:.3e} ≥ tail_eps={self.tail_eps:g} "
                f"при λmax·T={max_rate * self.horizon_T:g}"
            )
        return tail

    def ensure_covers(self, prior: Prior) -> float:
        return self.ensure_rate_covered(prior.max_rate)

    def truncation_budget(self, prior: Prior) -> float:
        """Оценка сверху вклада переходов за xmax в корневой риск."""
        return 2.0 * self.horizon_T * prior.max_gap * self.truncation_tail(prior.max_rate)

    def lattice_index(self, state: State) -> tuple[int, int, int, int]:
        """(n1, x1, n2, x2) для состояния на решётке."""
        indices = []
        for t in (state.t1, state.t2):
            n = round(t / self.delta)
            if abs(n * self.delta - t) > 1e-9 * max(1.0, self.horizon_T):
                raise DomainError(f"Время {t!r} не кратно шагу Δ={self.delta!r}")
            indices.append(n)
        n1, n2 = indices
        if n1 + n2 > self.steps_N:
            raise DomainError(f"t1 + t2 = {state.t!r} превышает горизонт {self.horizon_T!r}")
        if state.x1 > self.xmax or state.x2 > self.xmax:
            raise DomainError(f"Счётчики {state.x1}, {state.x2} превышают xmax={self.xmax}")
        return n1, state.x1, n2, state.x2


@dataclass
class RiskTable:
    """Риски по узлам (n1, n2); каждый узел хранит массив [x1, x2] формы (xmax+1, xmax+1)."""

    version: Recursion
    config: SolverConfig
    values: dict[tuple[int, int], np.ndarray]

    def node(self, n1: int, n2: int) -> np.ndarray:
        try:
            return self.values[(n1, n2)]
        except KeyError as e:
            raise DomainError(f"Узел ({n1}, {n2}) отсутствует в таблице рисков") from e

    def value(self, n1: int, x1: int, n2: int, x2: int) -> float:
        return float(self.node(n1, n2)[x1, x2])

    def value_at(self, state: State) -> float:
        return self.value(*self.config.lattice_index(state))

    @property
    def root(self) -> float:
        return self.value(0, 0, 0, 0)

    @property
    def is_complete(self) -> bool:
        n = self.config.steps_N
        return len(self.values) == (n + 1) * (n + 2) // 2

    def entries(self) -> Iterator[tuple[int, int, int, int, float]]:
        """Записи (n1, x1, n2, x2, value) в лексикографическом порядке."""
        for n1, x1, n2, x2, value in _lexicographic(self.values, self.config.xmax):
            yield n1, x1, n2, x2, float(value)


@dataclass
class StrategyTable:
    """Действия 1/2 по узлам; 0 означает, что стратегия в состоянии не определена."""

    version: Recursion | None
    config: SolverConfig
    actions: dict[tuple[int, int], np.ndarray]

    def node(self, n1: int, n2: int) -> np.ndarray:
        try:
            return self.actions[(n1, n2)]
        except KeyError as e:
            raise DomainError(f"Узел ({n1}, {n2}) отсутствует в таблице стратегии") from e

    def action(self, n1: int, x1: int, n2: int, x2: int) -> int:
        return int(self.node(n1, n2)[x1, x2])

    def action_at(self, state: State) -> int:
        return self.action(*self.config.lattice_index(state))

    def entries(self) -> Iterator[tuple[int, int, int, int, int]]:
        for n1, x1, n2, x2, action in _lexicographic(self.actions, self.config.xmax):
            if action:
                yield n1, x1, n2, x2, int(action)


def _lexicographic(nodes: dict[tuple[int, int], np.ndarray], xmax: int):
    by_n1: dict[int, list[int]] = {}
    for n1, n2 in nodes:
        by_n1.setdefault(n1, []).append(n2)
    for n1 in sorted(by_n1):
        for x1 in range(xmax + 1):
            for n2 in sorted(by_n1[n1]):
                row = nodes[(n1, n2)][x1]
                for x2 in range(xmax + 1):
                    yield n1, x1, n2, x2, row[x2]


class Solution(NamedTuple):
    risk: RiskTable
    strategy: StrategyTable
    root_risk: float
    truncation_budget: float


NodeStep = Callable[[int, int, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


def choose_action(config: SolverConfig, value1: np.ndarray, value2: np.ndarray) -> np.ndarray:
    """Маска «выбрать действие 1» с учётом правила ничьей."""
    if config.tie_rule is TieRule.PREFER_ARM_1:
        return value1 <= value2
    raise ConfigError(f"Правило ничьей {config.tie_rule!r} не поддерживается")


def backward_induction(
    config: SolverConfig, version: Recursion, step: NodeStep, keep_tables: bool = True
) -> tuple[RiskTable, StrategyTable]:
    """
    Общий проход назад по слоям n = N−1 … 0.

    ``step(n1, n2, next1, next2)`` возвращает значения обоих действий и маску
    возможных состояний; next1 соответствует узлу (n1+1, n2), next2 узлу (n1, n2+1).
    """
    size = config.xmax + 1
    n_steps = config.steps_N
    layer = {n1: np.zeros((size, size)) for n1 in range(n_steps + 1)}
    risk_values: dict[tuple[int, int], np.ndarray] = {}
    strategy_values: dict[tuple[int, int], np.ndarray] = {}
    if keep_tables:
        risk_values.update({(n1, n_steps - n1): layer[n1] for n1 in layer})

    for n in range(n_steps - 1, -1, -1):
        current = {}
        for n1 in range(n + 1):
            n2 = n - n1
            value1, value2, possible = step(n1, n2, layer[n1 + 1], layer[n1])
            first = choose_action(config, value1, value2)
            risk = np.where(possible, np.where(first, value1, value2), 0.0)
            action = np.where(possible, np.where(first, 1, 2), 0).astype(np.int8)
            current[n1] = risk
            if keep_tables or n == 0:
                risk_values[(n1, n2)] = risk
                strategy_values[(n1, n2)] = action
        layer = current
        logger.debug("Слой %s из %s обработан (%s), узлов: %s", n, n_steps, version.value, n + 1)

    return RiskTable(version, config, risk_values), StrategyTable(version, config, strategy_values)


def truncated_series(weights: np.ndarray, values: np.ndarray, eps: float, run_limit: int) -> np.ndarray:
    """
    Σ_j weights[x, x+j]·values[x+j, :] по первой оси.

    Ряд обрывается, когда слагаемое run_limit раз подряд меньше eps·частичная
    сумма. Критерий проверяется по слагаемым, а не по весам.
    """
    size = values.shape[0]
    total = np.zeros_like(values)
    run = np.zeros(values.shape, dtype=np.int64)
    active = np.ones(values.shape, dtype=bool)
    for j in range(size):
        rows = size - j
        term = np.zeros_like(values)
        term[:rows] = np.diagonal(weights, offset=j)[:, None] * values[j:]
        term = np.where(active, term, 0.0)
        total += term
        run = np.where(term < eps * total, run + 1, 0)
        active &= run < run_limit
        if not active[: rows - 1].any():
            break
    return total


def _prior_tables(prior: Prior, config: SolverConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    times = [config.time(n) for n in range(config.steps_N + 1)]
    log1 = log_pmf_table(prior.rates1, config.xmax, times)
    log2 = log_pmf_table(prior.rates2, config.xmax, times)
    return prior.log_weights(), log1, log2


def v1_step(prior: Prior, config: SolverConfig) -> NodeStep:
    log_w, log1, log2 = _prior_tables(prior, config)
    delta = config.delta
    shift1 = np.stack([poisson_shift_matrix(config.xmax, delta, lam) for lam in prior.rates1])
    shift2 = np.stack([poisson_shift_matrix(config.xmax, delta, lam) for lam in prior.rates2])
    loss1 = (prior.gaps(1) * delta)[:, None, None]
    loss2 = (prior.gaps(2) * delta)[:, None, None]

    def step(n1, n2, next1, next2):
        log_joint = log_w[:, None, None] + log1[:, n1, :, None] + log2[:, n2, None, :]
        post, possible, _ = posterior_from_log_joint(log_joint)
        continuation1 = np.einsum("kab,bc->kac", shift1, next1)
        continuation2 = np.einsum("kcb,ab->kac", shift2, next2)
        value1 = np.einsum("kac,kac->ac", post, loss1 + continuation1)
        value2 = np.einsum("kac,kac->ac", post, loss2 + continuation2)
        return value1, value2, possible

    return step


def v2_step(prior: Prior, config: SolverConfig) -> NodeStep:
    log_w, log1, log2 = _prior_tables(prior, config)
    delta = config.delta
    weights = [predictive_weight_matrix(config.xmax, config.time(n), delta) for n in range(config.steps_N)]
    gaps1, gaps2 = prior.gaps(1), prior.gaps(2)

    def step(n1, n2, next1, next2):
        log_joint = log_w[:, None, None] + log1[:, n1, :, None] + log2[:, n2, None, :]
        possible = np.isfinite(log_joint).any(axis=0)
        value1 = loss_from_log_joint(log_joint, gaps1) * delta + truncated_series(
            weights[n1], next1, config.tail_eps, config.stop_run
        )
        value2 = loss_from_log_joint(log_joint, gaps2) * delta + truncated_series(
            weights[n2], next2.T, config.tail_eps, config.stop_run
        ).T
        return value1, value2, possible

    return step


def _solve(prior: Prior, config: SolverConfig, version: Recursion, step: NodeStep, keep_tables: bool) -> Solution:
    config.ensure_covers(prior)
    risk, strategy = backward_induction(config, version, step, keep_tables)
    root = risk.root
    budget = config.truncation_budget(prior)
    logger.info(
        "✅ Рекурсия %s: T=%s, N=%s, xmax=%s, атомов %s, риск R_T(μ)=%.12g (бюджет усечения %.3e)",
        version.value, config.horizon_T, config.steps_N, config.xmax, len(prior), root, budget,
    )
    return Solution(risk, strategy, root, budget)


def solve_v1(prior: Prior, config: SolverConfig, keep_tables: bool = True) -> Solution:
    return _solve(prior, config, Recursion.V1, v1_step(prior, config), keep_tables)


def solve_v2(prior: Prior, config: SolverConfig, keep_tables: bool = True) -> Solution:
    return _solve(prior, config, Recursion.V2, v2_step(prior, config), keep_tables)


def solve(prior: Prior, config: SolverConfig, recursion: Recursion | str = Recursion.V1, keep_tables: bool = True) -> Solution:
    recursion = Recursion(recursion)
    if recursion is Recursion.V1:
        return solve_v1(prior, config, keep_tables)
    if recursion is Recursion.V2:
        return solve_v2(prior, config, keep_tables)
    raise ConfigError(f"Рекурсия {recursion.value!r} не является точной рекурсией v1/v2")


def normalize_v2(risk_v2: RiskTable, prior: Prior) -> RiskTable:
    """
    R = R̃ / μ(X₁, t₁, X₂, t₂) по всем узлам таблицы.

    Состояния с маргиналом < 1e-300 пропускаются: в них записывается NaN.
    """
    config = risk_v2.config
    values = {}
    skipped = 0
    for (n1, n2), node in risk_v2.values.items():
        marginal = lattice_marginal(prior, config.xmax, config.time(n1), config.time(n2))
        keep = marginal >= MARGINAL_SKIP
        skipped += int((~keep).sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            values[(n1, n2)] = np.where(keep, node / np.where(keep, marginal, 1.0), np.nan)
    if skipped:
        logger.info("Нормировка R̃: пропущено %s состояний с маргиналом < %g", skipped, MARGINAL_SKIP)
    return RiskTable(Recursion.V1, config, values)


@dataclass(frozen=True)
class EquivalenceAudit:
    max_relative_discrepancy: float
    root_v1: float
    root_v2: float
    compared_states: int
    skipped_states: int


def relative_discrepancy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(scale > 0, np.abs(a - b) / np.where(scale > 0, scale, 1.0), 0.0)


def audit_equivalence(prior: Prior, config: SolverConfig, marginal_floor: float = 1e-12) -> EquivalenceAudit:
    """Сравнение v1 и нормированной v2 на состояниях с маргиналом > marginal_floor."""
    first = solve_v1(prior, config)
    second = solve_v2(prior, config)
    normalized = normalize_v2(second.risk, prior)
    worst = 0.0
    compared = skipped = 0
    for key, node in first.risk.values.items():
        marginal = lattice_marginal(prior, config.xmax, config.time(key[0]), config.time(key[1]))
        mask = marginal > marginal_floor
        compared += int(mask.sum())
        skipped += int((~mask).sum())
        if mask.any():
            worst = max(worst, float(relative_discrepancy(node[mask], normalized.values[key][mask]).max()))
    logger.info("✅ Аудит v1/v2: макс. относительное расхождение %.3e на %s состояниях", worst, compared)
    return EquivalenceAudit(worst, first.root_risk, second.root_risk, compared, skipped)
