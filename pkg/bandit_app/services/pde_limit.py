"""
Линеаризованная схема первого порядка для малого шага δ и проверка
невязки предельного уравнения в частных производных для R̃.

У границы tℓ = 0 операторы делят на tℓ, поэтому там и в клетках, где
коэффициент 1 − xℓ·δ/tℓ стал бы отрицательным, используется точная
рекурсия v2 (гибридная схема).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from bandit_app.exceptions import ConfigError, DomainError
from bandit_app.services.core_model import (
    Prior,
    State,
    lattice_loss_integrand,
    log_pmf_table,
    loss_from_log_joint,
    loss_integrand,
    predictive_weight_matrix,
)
from bandit_app.services.dp_solver import (
    Recursion,
    RiskTable,
    Solution,
    SolverConfig,
    StrategyTable,
    backward_induction,
    truncated_series,
)


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinearizedConfig(SolverConfig):
    t_floor: float | None = None

    def __post_init__(self):
        super().__post_init__()
        t_floor = self.delta if self.t_floor is None else float(self.t_floor)
        if not math.isfinite(t_floor) or t_floor <= 0:
            raise ConfigError(f"t_floor={self.t_floor!r} должен быть положительным")
        if t_floor > self.horizon_T:
            raise ConfigError(f"t_floor={t_floor!r} превышает горизонт {self.horizon_T!r}")
        object.__setattr__(self, "t_floor", t_floor)

    @property
    def time_tol(self) -> float:
        return 1e-12 * self.horizon_T

    def in_linear_region(self, t: float) -> bool:
        return t >= self.t_floor - self.time_tol


def linear_coefficients(xmax: int, t: float, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Коэффициенты 1 − x·δ/t при R̃(x, t+δ) и (x+1)·δ/t при R̃(x+1, t+δ)."""
    x = np.arange(xmax + 1, dtype=float)
    return 1.0 - x * delta / t, (x + 1.0) * delta / t


def _arm_update(config: LinearizedConfig, n: int, next_values: np.ndarray, weights: list[np.ndarray]) -> np.ndarray:
    """Продолжение по первой оси массива next_values для действия со временем nδ."""
    t = config.time(n)
    if not config.in_linear_region(t):
        return truncated_series(weights[n], next_values, config.tail_eps, config.stop_run)
    stay, up = linear_coefficients(config.xmax, t, config.delta)
    linear_cells = stay >= 0
    shifted = np.zeros_like(next_values)
    shifted[:-1] = next_values[1:]
    linear = stay[:, None] * next_values + up[:, None] * shifted
    if linear_cells.all():
        return linear
    exact = truncated_series(weights[n], next_values, config.tail_eps, config.stop_run)
    return np.where(linear_cells[:, None], linear, exact)


def linearized_step(prior: Prior, config: LinearizedConfig):
    times = [config.time(n) for n in range(config.steps_N + 1)]
    log_w = prior.log_weights()
    log1 = log_pmf_table(prior.rates1, config.xmax, times)
    log2 = log_pmf_table(prior.rates2, config.xmax, times)
    delta = config.delta
    weights = [predictive_weight_matrix(config.xmax, config.time(n), delta) for n in range(config.steps_N)]
    gaps1, gaps2 = prior.gaps(1), prior.gaps(2)

    def step(n1, n2, next1, next2):
        log_joint = log_w[:, None, None] + log1[:, n1, :, None] + log2[:, n2, None, :]
        possible = np.isfinite(log_joint).any(axis=0)
        value1 = loss_from_log_joint(log_joint, gaps1) * delta + _arm_update(config, n1, next1, weights)
        value2 = loss_from_log_joint(log_joint, gaps2) * delta + _arm_update(config, n2, next2.T, weights).T
        return value1, value2, possible

    return step


def solve_linearized(prior: Prior, config: LinearizedConfig, keep_tables: bool = True) -> Solution:
    config.ensure_covers(prior)
    risk, strategy = backward_induction(config, Recursion.LINEARIZED, linearized_step(prior, config), keep_tables)
    root = risk.root
    budget = config.truncation_budget(prior)
    logger.info(
        "✅ Линеаризованная схема: T=%s, N=%s, xmax=%s, t_floor=%s, риск R_T(μ)=%.12g",
        config.horizon_T, config.steps_N, config.xmax, config.t_floor, root,
    )
    return Solution(risk, strategy, root, budget)


# ---------- НЕВЯЗКА УРАВНЕНИЯ ----------

def _arm_term(r0, forward, up, g, x, t, delta):
    return (forward - r0) / delta - r0 * x / t + up * (x + 1) / t + g


def _residual_terms(r0, forward1, forward2, up1, up2, g1, g2, x1, x2, t1, t2, delta):
    return np.minimum(
        _arm_term(r0, forward1, up1, g1, x1, t1, delta),
        _arm_term(r0, forward2, up2, g2, x2, t2, delta),
    )


def is_interior(config: LinearizedConfig, n1: int, n2: int) -> bool:
    bound = config.t_floor + config.delta - config.time_tol
    return config.time(n1) >= bound and config.time(n2) >= bound and n1 + n2 + 1 <= config.steps_N


def pde_residual(risk: RiskTable, prior: Prior, config: LinearizedConfig, state: State) -> float:
    """min по ℓ разностной аппроксимации ∂R̃/∂tℓ + D^{(ℓ)}R̃ + g^{(ℓ)} в состоянии."""
    n1, x1, n2, x2 = config.lattice_index(state)
    if not is_interior(config, n1, n2):
        raise DomainError(f"Состояние {state} не внутреннее: нужно tℓ ≥ t_floor + δ и t1 + t2 < T")
    if x1 + 1 > config.xmax or x2 + 1 > config.xmax:
        raise DomainError(f"Состояние {state} не внутреннее: нужно xℓ + 1 ≤ xmax={config.xmax}")
    r0 = risk.value_at(state)
    terms = []
    for arm in (1, 2):
        forward = risk.value_at(state.advanced(arm, dt=config.delta))
        up = risk.value_at(state.advanced(arm, events=1))
        g = loss_integrand(state, prior, arm)
        terms.append(_arm_term(r0, forward, up, g, state.count(arm), state.time(arm), config.delta))
    return float(min(terms))


def node_residual(risk: RiskTable, prior: Prior, config: LinearizedConfig, n1: int, n2: int) -> np.ndarray:
    """Невязка во всех клетках узла (n1, n2) с x1, x2 < xmax; форма (xmax, xmax)."""
    t1, t2 = config.time(n1), config.time(n2)
    node = risk.node(n1, n2)
    inner = slice(0, config.xmax)
    g1, g2 = lattice_loss_integrand(prior, config.xmax, t1, t2)
    x = np.arange(config.xmax, dtype=float)
    return _residual_terms(
        node[inner, inner],
        risk.node(n1 + 1, n2)[inner, inner],
        risk.node(n1, n2 + 1)[inner, inner],
        node[1:, inner],
        node[inner, 1:],
        g1[inner, inner],
        g2[inner, inner],
        x[:, None], x[None, :], t1, t2, config.delta,
    )


def fallback_cells(config: LinearizedConfig, n1: int, n2: int) -> np.ndarray:
    """Клетки узла, где хотя бы одно действие продолжено точными весами v2, а не линейно."""
    size = config.xmax + 1
    masks = []
    for n in (n1, n2):
        t = config.time(n)
        if not config.in_linear_region(t):
            masks.append(np.ones(size, dtype=bool))
        else:
            masks.append(linear_coefficients(config.xmax, t, config.delta)[0] < 0)
    return masks[0][:, None] | masks[1][None, :]


def switch_band(strategy: StrategyTable, n1: int, n2: int) -> np.ndarray:
    """Клетки узла, где действие не определено или отличается от соседнего."""
    actions = strategy.node(n1, n2)
    band = actions == 0
    for axis in (0, 1):
        differs = np.diff(actions, axis=axis) != 0
        pad_before = [(0, 0), (0, 0)]
        pad_after = [(0, 0), (0, 0)]
        pad_before[axis] = (1, 0)
        pad_after[axis] = (0, 1)
        band |= np.pad(differs, pad_before) | np.pad(differs, pad_after)
    for key in ((n1 + 1, n2), (n1 - 1, n2), (n1, n2 + 1), (n1, n2 - 1)):
        neighbour = strategy.actions.get(key)
        if neighbour is not None:
            band |= (neighbour != 0) & (neighbour != actions)
    return band


@dataclass(frozen=True)
class ResidualAudit:
    max_abs_residual: float
    audited_states: int
    excluded_states: int


def residual_audit(
    risk: RiskTable,
    strategy: StrategyTable,
    prior: Prior,
    config: LinearizedConfig,
    min_time: float | None = None,
) -> ResidualAudit:
    """
    Максимум |невязки| по внутренним состояниям вне полосы переключения действий.
    Клетки, продолженные точными весами (``fallback_cells``), тоже исключаются.

    Ошибка разностной невязки имеет порядок δ·xℓ/tℓ, поэтому при t_floor = δ
    она не убывает у границы; ``min_time`` задаёт фиксированную нижнюю
    границу tℓ для сравнения разных δ.
    """
    if not risk.is_complete:
        raise DomainError("Для аудита невязки нужна полная таблица рисков")
    worst = 0.0
    audited = excluded = 0
    inner = slice(0, config.xmax)
    for n in range(config.steps_N):
        for n1 in range(n + 1):
            n2 = n - n1
            if not is_interior(config, n1, n2):
                continue
            if min_time is not None and min(config.time(n1), config.time(n2)) < min_time - config.time_tol:
                continue
            residual = node_residual(risk, prior, config, n1, n2)
            band = (switch_band(strategy, n1, n2) | fallback_cells(config, n1, n2))[inner, inner]
            excluded += int(band.sum())
            kept = np.abs(residual[~band])
            audited += kept.size
            if kept.size:
                worst = max(worst, float(kept.max()))
    logger.info("✅ Аудит невязки: max |r| = %.3e на %s состояниях (исключено %s)", worst, audited, excluded)
    return ResidualAudit(worst, audited, excluded)
