"""
Вероятностное ядро пуассоновского двурукого бандита.

Все вычисления вероятностей ведутся в логарифмической шкале с одной
финальной экспонентой: факториалы порядка xmax + N не помещаются в double.
Соглашение 0**0 = 1 обеспечивается через ``scipy.special.xlogy``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy
from scipy.stats import nbinom, poisson

from bandit_app.exceptions import DomainError, ImpossibleObservationError


logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
ARMS = (1, 2)


def _check_count(name: str, value) -> int:
    if isinstance(value, bool) or int(value) != value or value < 0:
        raise DomainError(f"{name}={value!r}: ожидается неотрицательное целое")
    return int(value)


def _check_time(name: str, value) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise DomainError(f"{name}={value!r}: ожидается конечное неотрицательное число")
    return value


def check_arm(arm) -> int:
    if arm not in ARMS:
        raise DomainError(f"Номер действия должен быть 1 или 2, получено {arm!r}")
    return int(arm)


# ---------- ТИПЫ ПРЕДМЕТНОЙ ОБЛАСТИ ----------

@dataclass(frozen=True)
class ParameterPoint:
    """Пара интенсивностей θ = (λ₁, λ₂) одного экземпляра бандита."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        object.__setattr__(self, "lambda1", _check_time("lambda1", self.lambda1))
        object.__setattr__(self, "lambda2", _check_time("lambda2", self.lambda2))

    def rate(self, arm: int) -> float:
        return self.lambda1 if check_arm(arm) == 1 else self.lambda2

    @property
    def best_rate(self) -> float:
        return max(self.lambda1, self.lambda2)

    def gap(self, arm: int) -> float:
        """(λ_other − λ_arm)^+: потери в единицу времени при выборе ``arm``."""
        return self.best_rate - self.rate(arm)

    def as_tuple(self) -> tuple[float, float]:
        return self.lambda1, self.lambda2


@dataclass(frozen=True)
class Prior:
    """
    Конечное априорное распределение: атомы (θ, вес).

    Непрерывные плотности попадают сюда только после дискретизации
    (см. ``from_quadrature``).
    """

    atoms: tuple[tuple[ParameterPoint, float], ...]

    def __post_init__(self):
        atoms = tuple(
            (point if isinstance(point, ParameterPoint) else ParameterPoint(*point), float(weight))
            for point, weight in self.atoms
        )
        if not atoms:
            raise DomainError("Априорное распределение не содержит атомов")
        for point, weight in atoms:
            if not math.isfinite(weight) or weight < 0:
                raise DomainError(f"Вес атома {point.as_tuple()} некорректен: {weight!r}")
        total = math.fsum(weight for _, weight in atoms)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise DomainError(f"Сумма весов {total!r} отличается от 1 более чем на {WEIGHT_SUM_TOL}")
        seen = set()
        for point, _ in atoms:
            if point in seen:
                raise DomainError(f"Атом {point.as_tuple()} повторяется")
            seen.add(point)
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[float]]) -> "Prior":
        """Строки ``(lambda1, lambda2, weight)``."""
        return cls(tuple((ParameterPoint(l1, l2), w) for l1, l2, w in rows))

    @classmethod
    def on_grid(cls, points: Sequence[ParameterPoint], weights: Sequence[float]) -> "Prior":
        if len(points) != len(weights):
            raise DomainError("Число точек сетки и весов не совпадает")
        return cls(tuple(zip(points, (float(w) for w in weights))))

    @classmethod
    def uniform(cls, points: Sequence[ParameterPoint]) -> "Prior":
        if not points:
            raise DomainError("Пустая сетка параметров")
        return cls.on_grid(points, [1.0 / len(points)] * len(points))

    @classmethod
    def point_mass(cls, point: ParameterPoint) -> "Prior":
        return cls(((point, 1.0),))

    @classmethod
    def from_quadrature(
        cls,
        density: Callable[[float, float], float],
        nodes1: Sequence[float],
        nodes2: Sequence[float],
        weights1: Sequence[float],
        weights2: Sequence[float],
    ) -> "Prior":
        """
        Дискретизация плотности μ(λ₁, λ₂) прямоугольной квадратурой.

        Масса атома в узле (a, b) равна density(a, b)·weights1[i]·weights2[j];
        атомы с нулевой массой отбрасываются, веса нормируются.
        """
        if len(nodes1) != len(weights1) or len(nodes2) != len(weights2):
            raise DomainError("Узлы и веса квадратуры имеют разную длину")
        masses = []
        for a, qa in zip(nodes1, weights1):
            for b, qb in zip(nodes2, weights2):
                mass = float(density(a, b)) * qa * qb
                if not math.isfinite(mass) or mass < 0:
                    raise DomainError(f"Плотность в узле ({a}, {b}) некорректна: {mass!r}")
                if mass > 0:
                    masses.append((ParameterPoint(a, b), mass))
        total = math.fsum(mass for _, mass in masses)
        if total <= 0:
            raise DomainError("Квадратура дала нулевую полную массу")
        return cls(tuple((point, mass / total) for point, mass in masses))

    def mix(self, other: "Prior", alpha: float) -> "Prior":
        """Смесь α·self + (1 − α)·other на общем носителе."""
        if not 0.0 <= alpha <= 1.0:
            raise DomainError(f"Коэффициент смеси вне [0, 1]: {alpha!r}")
        if self.points != other.points:
            raise DomainError("Смешивать можно только распределения с одинаковыми атомами")
        weights = alpha * self.weights + (1.0 - alpha) * other.weights
        return Prior.on_grid(self.points, weights.tolist())

    @property
    def points(self) -> tuple[ParameterPoint, ...]:
        return tuple(point for point, _ in self.atoms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([weight for _, weight in self.atoms])

    @property
    def rates1(self) -> np.ndarray:
        return np.array([point.lambda1 for point, _ in self.atoms])

    @property
    def rates2(self) -> np.ndarray:
        return np.array([point.lambda2 for point, _ in self.atoms])

    @property
    def max_rate(self) -> float:
        return max(point.best_rate for point, _ in self.atoms)

    @property
    def max_gap(self) -> float:
        return max(abs(point.lambda1 - point.lambda2) for point, _ in self.atoms)

    def gaps(self, arm: int) -> np.ndarray:
        return np.array([point.gap(arm) for point, _ in self.atoms])

    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def __len__(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True)
class State:
    """Достаточная статистика (X₁, t₁, X₂, t₂)."""

    x1: int
    t1: float
    x2: int
    t2: float

    def __post_init__(self):
        object.__setattr__(self, "x1", _check_count("x1", self.x1))
        object.__setattr__(self, "x2", _check_count("x2", self.x2))
        object.__setattr__(self, "t1", _check_time("t1", self.t1))
        object.__setattr__(self, "t2", _check_time("t2", self.t2))
        if self.t1 == 0 and self.x1 > 0 or self.t2 == 0 and self.x2 > 0:
            raise DomainError(f"За нулевое время не может быть событий: {self}")

    @classmethod
    def on_lattice(cls, n1: int, x1: int, n2: int, x2: int, delta: float) -> "State":
        return cls(x1, n1 * delta, x2, n2 * delta)

    @property
    def t(self) -> float:
        return self.t1 + self.t2

    def count(self, arm: int) -> int:
        return self.x1 if check_arm(arm) == 1 else self.x2

    def time(self, arm: int) -> float:
        return self.t1 if check_arm(arm) == 1 else self.t2

    def advanced(self, arm: int, events: int = 0, dt: float = 0.0) -> "State":
        """Состояние после ещё dt времени и events событий на действии arm."""
        if check_arm(arm) == 1:
            return State(self.x1 + events, self.t1 + dt, self.x2, self.t2)
        return State(self.x1, self.t1, self.x2 + events, self.t2 + dt)


@dataclass(frozen=True)
class Posterior:
    atoms: tuple[tuple[ParameterPoint, float], ...]
    marginal: float

    @property
    def weights(self) -> np.ndarray:
        return np.array([weight for _, weight in self.atoms])

    def expected_gap(self, arm: int) -> float:
        return math.fsum(weight * point.gap(arm) for point, weight in self.atoms)


# ---------- СКАЛЯРНЫЕ ОПЕРАЦИИ ----------

def log_poisson_pmf(i, t, lam):
    """log p(i, t; λ) поэлементно; при t = 0 даёт 0 для i = 0 и −inf иначе."""
    i = np.asarray(i, dtype=float)
    mean = np.asarray(lam, dtype=float) * np.asarray(t, dtype=float)
    return xlogy(i, mean) - mean - gammaln(i + 1.0)


def poisson_pmf(i: int, t: float, lam: float) -> float:
    i = _check_count("i", i)
    t = _check_time("t", t)
    lam = _check_time("lambda", lam)
    return float(np.exp(log_poisson_pmf(i, t, lam)))


def _log_likelihood(state: State, rates1: np.ndarray, rates2: np.ndarray) -> np.ndarray:
    return log_poisson_pmf(state.x1, state.t1, rates1) + log_poisson_pmf(state.x2, state.t2, rates2)


def likelihood(state: State, theta: ParameterPoint) -> float:
    return float(np.exp(_log_likelihood(state, np.array(theta.lambda1), np.array(theta.lambda2))))


def _log_joint(state: State, prior: Prior) -> np.ndarray:
    return prior.log_weights() + _log_likelihood(state, prior.rates1, prior.rates2)


def posterior(state: State, prior: Prior) -> Posterior:
    log_joint = _log_joint(state, prior)
    if np.all(np.isneginf(log_joint)):
        raise ImpossibleObservationError(
            f"Состояние {state} невозможно ни при одном атоме априорного распределения"
        )
    log_marginal = logsumexp(log_joint)
    weights = np.exp(log_joint - log_marginal)
    return Posterior(
        atoms=tuple((point, float(w)) for point, w in zip(prior.points, weights)),
        marginal=float(np.exp(log_marginal)),
    )


def loss_integrand(state: State, prior: Prior, arm: int) -> float:
    """g^{(arm)}: маргинальное правдоподобие × апостериорное среднее (λ_other − λ_arm)^+."""
    gaps = prior.gaps(check_arm(arm))
    terms = gaps * np.exp(_log_joint(state, prior))
    return math.fsum(terms.tolist())


def predictive_log_weight(x, t, j, delta):
    """Логарифм t^x Δ^j (x+j)! / ((t+Δ)^(x+j) x! j!) поэлементно."""
    x = np.asarray(x, dtype=float)
    j = np.asarray(j, dtype=float)
    t = np.asarray(t, dtype=float)
    return (
        xlogy(x, t)
        + xlogy(j, delta)
        + gammaln(x + j + 1.0)
        - xlogy(x + j, t + delta)
        - gammaln(x + 1.0)
        - gammaln(j + 1.0)
    )


def predictive_weight(x: int, t: float, j: int, delta: float) -> float:
    x = _check_count("x", x)
    j = _check_count("j", j)
    t = _check_time("t", t)
    if not math.isfinite(delta) or delta <= 0:
        raise DomainError(f"Шаг delta={delta!r} должен быть положительным")
    return float(np.exp(predictive_log_weight(x, t, j, delta)))


# ---------- УСЕЧЕНИЕ РЯДОВ ----------

def poisson_truncation(rate: float, eps: float) -> int:
    """Наименьшее M, при котором P(X > M) < eps для X ~ Poisson(rate)."""
    rate = _check_time("rate", rate)
    if rate == 0:
        return 0
    m = int(poisson.isf(eps, rate))
    while poisson.sf(m, rate) >= eps:
        m += 1
    return m


def predictive_truncation(x: int, t: float, delta: float, eps: float) -> int:
    """
    Индекс усечения j-суммы весов при t > 0.

    Веса равны pmf отрицательного биномиального NB(x+1, p = t/(t+Δ)),
    делённой на p, поэтому хвост весов после M меньше eps при sf(M) < eps·p.
    """
    x = _check_count("x", x)
    if t <= 0:
        raise DomainError("Сумма весов расходится при t = 0")
    p = t / (t + delta)
    m = int(nbinom.isf(eps * p, x + 1, p))
    while nbinom.sf(m, x + 1, p) >= eps * p:
        m += 1
    return m


def predictive_weight_sum(x: int, t: float, delta: float, eps: float = 1e-12) -> float:
    m = predictive_truncation(x, t, delta, eps)
    terms = np.exp(predictive_log_weight(x, t, np.arange(m + 1), delta))
    return math.fsum(terms.tolist())


# ---------- ВЕКТОРНЫЕ ЯДРА НА РЕШЁТКЕ ----------

def log_pmf_table(rates: np.ndarray, xmax: int, times: Sequence[float]) -> np.ndarray:
    """Таблица log p(x, t_n; λ_k) формы (K, len(times), xmax + 1)."""
    x = np.arange(xmax + 1, dtype=float)
    times = np.asarray(times, dtype=float)
    return log_poisson_pmf(x[None, None, :], times[None, :, None], np.asarray(rates)[:, None, None])


def lattice_log_joint(prior: Prior, xmax: int, t1: float, t2: float) -> np.ndarray:
    """log w_k + log L_k(x₁, t₁, x₂, t₂) формы (K, xmax + 1, xmax + 1)."""
    log1 = log_pmf_table(prior.rates1, xmax, [t1])[:, 0, :]
    log2 = log_pmf_table(prior.rates2, xmax, [t2])[:, 0, :]
    return prior.log_weights()[:, None, None] + log1[:, :, None] + log2[:, None, :]


def posterior_from_log_joint(log_joint: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Апостериорные веса, маска возможных состояний и log маргинала."""
    log_marginal = logsumexp(log_joint, axis=0)
    possible = np.isfinite(log_marginal)
    with np.errstate(invalid="ignore"):
        weights = np.exp(log_joint - np.where(possible, log_marginal, 0.0))
    weights = np.where(possible[None, :, :], weights, 0.0)
    return weights, possible, log_marginal


def loss_from_log_joint(log_joint: np.ndarray, gaps: np.ndarray) -> np.ndarray:
    return np.einsum("k,kab->ab", gaps, np.exp(log_joint))


def lattice_marginal(prior: Prior, xmax: int, t1: float, t2: float) -> np.ndarray:
    return np.exp(logsumexp(lattice_log_joint(prior, xmax, t1, t2), axis=0))


def lattice_posterior(prior: Prior, xmax: int, t1: float, t2: float):
    return posterior_from_log_joint(lattice_log_joint(prior, xmax, t1, t2))


def lattice_loss_integrand(prior: Prior, xmax: int, t1: float, t2: float) -> tuple[np.ndarray, np.ndarray]:
    log_joint = lattice_log_joint(prior, xmax, t1, t2)
    return loss_from_log_joint(log_joint, prior.gaps(1)), loss_from_log_joint(log_joint, prior.gaps(2))


def _shift_index(xmax: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.arange(xmax + 1)
    j = x[None, :] - x[:, None]
    upper = j >= 0
    return x, np.where(upper, j, 0), upper


def predictive_weight_matrix(xmax: int, t: float, delta: float) -> np.ndarray:
    """W[x, x'] = вес перехода x → x' (j = x' − x ≥ 0); переходы за xmax отбрасываются."""
    x, j, upper = _shift_index(xmax)
    weights = np.exp(predictive_log_weight(x[:, None], t, j, delta))
    return np.where(upper, weights, 0.0)


def poisson_shift_matrix(xmax: int, delta: float, lam: float) -> np.ndarray:
    """M[x, x'] = p(x' − x, Δ; λ)."""
    _, j, upper = _shift_index(xmax)
    return np.where(upper, np.exp(log_poisson_pmf(j, delta, lam)), 0.0)
