"""
Файлы запуска и артефакты: конфигурация ``key = value``, априорные
распределения, таблицы риска/стратегии, отчёты CSV и JSON.

Каждый артефакт начинается с эха конфигурации (строки ``# key = value``),
которое снова разбирается ``parse_config``. Числа печатаются с 12 значащими
цифрами; в файлы не попадают ни время, ни пути окружения.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import pandas as pd
from django.conf import settings

from bandit_app.exceptions import (
    ArtifactIOError,
    ConfigError,
    ConfigParseError,
    DomainError,
)
from bandit_app.services.core_model import ParameterPoint, Prior
from bandit_app.services.dp_solver import (
    Recursion,
    RiskTable,
    SolverConfig,
    StrategyTable,
    TieRule,
    audit_equivalence,
    solve,
)
from bandit_app.services.evaluation import evaluate_grid, regret_truncation_budget, simulate, simulate_prior
from bandit_app.services.game_solver import find_worst_prior
from bandit_app.services.pde_limit import LinearizedConfig, residual_audit, solve_linearized


logger = logging.getLogger(__name__)

COMMANDS = ("solve", "linearized", "evaluate", "simulate", "minimax", "audit")
PRIOR_SUM_TOL = 1e-6
FLOAT_FORMAT = "%.12g"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_SOLVER = 4

_SOLVER_KEYS = {"horizon_T", "steps_N", "xmax"}
REQUIRED_KEYS = {
    "solve": {"prior_path"} | _SOLVER_KEYS,
    "linearized": {"prior_path"} | _SOLVER_KEYS,
    "evaluate": {"prior_path"} | _SOLVER_KEYS,
    "simulate": {"prior_path", "replications"} | _SOLVER_KEYS,
    "minimax": {"grid_path"} | _SOLVER_KEYS,
    "audit": {"prior_path"} | _SOLVER_KEYS,
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    horizon_T: float
    steps_N: int
    xmax: int
    prior_path: Path | None = None
    tail_eps: float = 1e-10
    t_floor: float | None = None
    recursion: Recursion | None = None
    theta: ParameterPoint | None = None
    replications: int | None = None
    seed: int = 0
    grid_path: Path | None = None
    output_dir: Path = Path(".")
    max_iterations: int = 200
    gap_tol: float = 1e-6
    tie_rule: TieRule = TieRule.PREFER_ARM_1
    workers: int = 1

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            horizon_T=self.horizon_T,
            steps_N=self.steps_N,
            xmax=self.xmax,
            tail_eps=self.tail_eps,
            tie_rule=self.tie_rule,
            stop_run=_options().get("STOP_RUN", 5),
        )

    def linearized_config(self) -> LinearizedConfig:
        return LinearizedConfig(
            horizon_T=self.horizon_T,
            steps_N=self.steps_N,
            xmax=self.xmax,
            tail_eps=self.tail_eps,
            tie_rule=self.tie_rule,
            stop_run=_options().get("STOP_RUN", 5),
            t_floor=self.t_floor,
        )


# ---------- РАЗБОР КОНФИГУРАЦИИ ----------

def _options() -> dict:
    return getattr(settings, "POISSON_BANDIT", {})


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise ValueError(f"ожидается положительное целое, получено {number}")
    return number


def _non_negative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise ValueError(f"ожидается неотрицательное целое, получено {number}")
    return number


def _finite_float(value: str) -> float:
    number = float(value)
    if not math.isfinite(number):
        raise ValueError(f"ожидается конечное число, получено {value}")
    return number


def _theta(value: str) -> ParameterPoint:
    parts = value.replace(",", " ").split()
    if len(parts) != 2:
        raise ValueError("theta задаётся двумя числами: lambda1 lambda2")
    return ParameterPoint(float(parts[0]), float(parts[1]))


def _command(value: str) -> str:
    if value not in COMMANDS:
        raise ValueError(f"неизвестная команда {value}")
    return value


CONVERTERS: dict[str, Callable[[str], object]] = {
    "command": _command,
    "prior_path": Path,
    "horizon_T": _finite_float,
    "steps_N": int,
    "xmax": int,
    "tail_eps": _finite_float,
    "t_floor": _finite_float,
    "recursion": Recursion,
    "theta": _theta,
    "replications": _positive_int,
    "seed": _non_negative_int,
    "grid_path": Path,
    "output_dir": Path,
    "max_iterations": _positive_int,
    "gap_tol": _finite_float,
    "tie_rule": TieRule,
    "workers": _positive_int,
}


def _defaults() -> dict:
    options = _options()
    return {
        "tail_eps": options.get("TAIL_EPS", 1e-10),
        "tie_rule": TieRule(options.get("TIE_RULE", TieRule.PREFER_ARM_1.value)),
        "seed": options.get("SEED", 0),
        "max_iterations": options.get("MAX_ITERATIONS", 200),
        "gap_tol": options.get("GAP_TOL", 1e-6),
        "workers": options.get("WORKERS", 1),
        "output_dir": Path(options.get("OUTPUT_DIR", ".")),
    }


def parse_config(text: str, command: str | None = None) -> RunConfig:
    """Разбор документа ``key = value`` (по одному на строку, ``#`` начинает комментарий)."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"ожидается 'key = value', получено '{line}'", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONVERTERS:
            raise ConfigParseError(f"неизвестный ключ '{key}'", lineno, key)
        if key in values:
            raise ConfigParseError(f"ключ '{key}' задан повторно", lineno, key)
        try:
            values[key] = CONVERTERS[key](value)
        except (ValueError, DomainError) as e:
            raise ConfigParseError(f"некорректное значение '{value}' для ключа '{key}': {e}", lineno, key) from e

    if command is not None:
        if values.get("command", command) != command:
            raise ConfigParseError(
                f"команда в файле '{values['command']}' не совпадает с командой запуска '{command}'", key="command"
            )
        values["command"] = command
    if "command" not in values:
        raise ConfigParseError("отсутствует обязательный ключ 'command'", key="command")
    missing = sorted(REQUIRED_KEYS[values["command"]] - values.keys())
    if missing:
        raise ConfigParseError(
            f"отсутствуют обязательные ключи {', '.join(missing)} для команды '{values['command']}'", key=missing[0]
        )

    for key, value in _defaults().items():
        values.setdefault(key, value)
    config = RunConfig(**values)
    if config.command == "linearized":
        config.linearized_config()
    else:
        config.solver_config()
    return config


def format_config(config: RunConfig) -> str:
    lines = []
    for item in dataclasses.fields(config):
        value = getattr(config, item.name)
        if value is None:
            continue
        if isinstance(value, ParameterPoint):
            text = f"{value.lambda1!r} {value.lambda2!r}"
        elif isinstance(value, (Recursion, TieRule)):
            text = value.value
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{item.name} = {text}")
    return "\n".join(lines) + "\n"


def config_echo(config: RunConfig) -> str:
    return "".join(f"# {line}\n" for line in format_config(config).splitlines())


def read_config_echo(path: Path) -> RunConfig:
    """Восстановление конфигурации запуска из эха в заголовке артефакта."""
    path = Path(path)
    text = _read_text(path)
    if path.suffix == ".json":
        return parse_config(json.loads(text)["config"])
    echo = []
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        if line.startswith("# "):
            echo.append(line[2:])
    return parse_config("\n".join(echo))


# ---------- АПРИОРНЫЕ РАСПРЕДЕЛЕНИЯ И СЕТКИ ----------

def _read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"Ошибка чтения файла {path}: {e}") from e


def _numeric_rows(text: str, widths: tuple[int, ...]) -> list[tuple[int, list[float]]]:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in widths:
            raise ConfigParseError(f"ожидается {' или '.join(map(str, widths))} числа, получено '{line}'", lineno)
        try:
            rows.append((lineno, [float(part) for part in parts]))
        except ValueError as e:
            raise ConfigParseError(f"некорректное число в строке '{line}'", lineno) from e
    return rows


def parse_prior(text: str) -> Prior:
    """Строки ``lambda1 lambda2 weight``; веса нормируются, если сумма в пределах 1e-6 от 1."""
    rows = [values for _, values in _numeric_rows(text, (3,))]
    if not rows:
        raise ConfigParseError("файл априорного распределения пуст")
    total = math.fsum(row[2] for row in rows)
    if abs(total - 1.0) > PRIOR_SUM_TOL:
        raise ConfigParseError(f"сумма весов {total!r} отличается от 1 более чем на {PRIOR_SUM_TOL}")
    if abs(total - 1.0) > 1e-12:
        rows = [[l1, l2, w / total] for l1, l2, w in rows]
    return Prior.from_rows(rows)


def read_prior(path: Path) -> Prior:
    return parse_prior(_read_text(path))


def format_prior(prior: Prior) -> str:
    return "".join(f"{point.lambda1!r} {point.lambda2!r} {weight!r}\n" for point, weight in prior.atoms)


def write_prior(prior: Prior, path: Path, header: str = "") -> Path:
    path = Path(path)
    try:
        path.write_text(header + format_prior(prior), encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(f"Ошибка записи файла {path}: {e}") from e
    return path


def read_grid(path: Path) -> list[ParameterPoint]:
    """Строки ``lambda1 lambda2``; третий столбец (вес) допускается и игнорируется."""
    rows = _numeric_rows(_read_text(path), (2, 3))
    if not rows:
        raise ConfigParseError("файл сетки параметров пуст")
    return [ParameterPoint(values[0], values[1]) for _, values in rows]


def exit_status(error: BaseException) -> int:
    if isinstance(error, ArtifactIOError):
        return EXIT_IO
    if isinstance(error, (ConfigError, DomainError)):
        return EXIT_VALIDATION
    return EXIT_SOLVER


def _round12(value):
    if isinstance(value, float):
        return float(FLOAT_FORMAT % value)
    if isinstance(value, dict):
        return {key: _round12(item) for key, item in value.items()}
    if isinstance(value, list):
        return [_round12(item) for item in value]
    return value


# ---------- СЕРВИС ЗАПУСКА ----------

class BanditRunService:
    """
    Выполняет одну команду по RunConfig и пишет артефакты в output_dir.
    Ожидается, что конфигурация уже прошла ``parse_config``.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.echo = config_echo(config)
        self.written: list[Path] = []

    # ---------- ВСПОМОГАТЕЛЬНЫЕ МЕТОДЫ ----------

    def _open(self, name: str):
        path = self.output_dir / name
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            handle = path.open("w", encoding="utf-8", newline="")
        except OSError as e:
            raise ArtifactIOError(f"Ошибка создания файла {path}: {e}") from e
        return path, handle

    def _write(self, name: str, body: Callable) -> Path:
        path, handle = self._open(name)
        try:
            with handle:
                body(handle)
        except OSError as e:
            raise ArtifactIOError(f"Ошибка записи файла {path}: {e}") from e
        self.written.append(path)
        logger.info("✅ Записан файл %s", path)
        return path

    def _table_header(self, version: Recursion) -> str:
        c = self.config
        return f"## T={c.horizon_T!r} N={c.steps_N} xmax={c.xmax} recursion={version.value}\n"

    def _write_frame(self, name: str, frame: pd.DataFrame, preamble: str = "", **options) -> Path:
        def body(handle):
            handle.write(self.echo)
            handle.write(preamble)
            frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", **options)

        return self._write(name, body)

    def write_risk_table(self, table: RiskTable) -> Path:
        frame = pd.DataFrame(list(table.entries()), columns=["n1", "x1", "n2", "x2", "value"])
        frame = frame.sort_values(["n1", "x1", "n2", "x2"], kind="mergesort")
        return self._write_frame(
            f"risk_{table.version.value}.txt", frame, self._table_header(table.version), sep=" ", header=False
        )

    def write_strategy_table(self, table: StrategyTable, version: Recursion) -> Path:
        frame = pd.DataFrame(list(table.entries()), columns=["n1", "x1", "n2", "x2", "action"])
        frame = frame.sort_values(["n1", "x1", "n2", "x2"], kind="mergesort")
        return self._write_frame(
            f"strategy_{version.value}.txt", frame, self._table_header(version), sep=" ", header=False
        )

    def write_summary(self, name: str, items: dict) -> Path:
        def body(handle):
            handle.write(self.echo)
            for key, value in items.items():
                text = FLOAT_FORMAT % value if isinstance(value, float) else str(value)
                handle.write(f"{key} = {text}\n")

        return self._write(name, body)

    def write_regret_report(self, name: str, rows: list[dict], extra: tuple[str, ...] = ()) -> Path:
        columns = ["theta1", "theta2", "mean", "std_error", "replications", "seed", *extra]
        return self._write_frame(name, pd.DataFrame(rows, columns=columns))

    # ---------- КОМАНДЫ ----------

    def _recursion(self, default: Recursion = Recursion.V1) -> Recursion:
        return self.config.recursion or default

    def run_solve(self) -> None:
        prior = read_prior(self.config.prior_path)
        recursion = self._recursion()
        solution = solve(prior, self.config.solver_config(), recursion)
        self.write_risk_table(solution.risk)
        self.write_strategy_table(solution.strategy, recursion)
        self.write_summary("summary.txt", {
            "recursion": recursion.value,
            "root_risk": solution.root_risk,
            "truncation_budget": solution.truncation_budget,
        })

    def run_linearized(self) -> None:
        prior = read_prior(self.config.prior_path)
        config = self.config.linearized_config()
        solution = solve_linearized(prior, config)
        audit = residual_audit(solution.risk, solution.strategy, prior, config)
        self.write_risk_table(solution.risk)
        self.write_strategy_table(solution.strategy, Recursion.LINEARIZED)
        self.write_summary("summary.txt", {
            "recursion": Recursion.LINEARIZED.value,
            "t_floor": config.t_floor,
            "root_risk": solution.root_risk,
            "truncation_budget": solution.truncation_budget,
            "max_abs_residual": audit.max_abs_residual,
            "audited_states": audit.audited_states,
            "excluded_states": audit.excluded_states,
        })

    def run_evaluate(self) -> None:
        prior = read_prior(self.config.prior_path)
        config = self.config.solver_config()
        solution = solve(prior, config, self._recursion())
        points = [self.config.theta] if self.config.theta else list(prior.points)
        regrets = evaluate_grid(solution.strategy, points, config, self.config.workers)
        rows = [
            {"theta1": p.lambda1, "theta2": p.lambda2, "mean": float(r), "std_error": 0.0,
             "replications": 0, "seed": self.config.seed, "truncation_budget": regret_truncation_budget(p, config)}
            for p, r in zip(points, regrets)
        ]
        self.write_regret_report("regret_exact.csv", rows, extra=("truncation_budget",))
        summary = {
            "root_risk": solution.root_risk,
            "truncation_budget": max(row["truncation_budget"] for row in rows),
        }
        if self.config.theta is None:
            summary["bayes_average"] = math.fsum((prior.weights * regrets).tolist())
        self.write_summary("summary.txt", summary)

    def run_simulate(self) -> None:
        prior = read_prior(self.config.prior_path)
        config = self.config.solver_config()
        solution = solve(prior, config, self._recursion())
        c = self.config
        if c.theta is not None:
            estimate = simulate(solution.strategy, c.theta, config, c.replications, c.seed, c.workers)
            theta1, theta2 = c.theta.as_tuple()
        else:
            estimate = simulate_prior(solution.strategy, prior, config, c.replications, c.seed, c.workers)
            theta1 = theta2 = None
        self.write_regret_report("regret_mc.csv", [{
            "theta1": theta1, "theta2": theta2, "mean": estimate.mean, "std_error": estimate.std_error,
            "replications": estimate.replications, "seed": estimate.seed,
        }])
        self.write_summary("summary.txt", {
            "mean": estimate.mean,
            "std_error": estimate.std_error,
            "replications": estimate.replications,
            "seed": estimate.seed,
            "clamp_rate": estimate.clamp_rate,
        })

    def run_minimax(self) -> None:
        grid = read_grid(self.config.grid_path)
        c = self.config
        result = find_worst_prior(
            grid, c.solver_config(), c.max_iterations, c.gap_tol, self._recursion(Recursion.V2), c.workers
        )
        report = _round12({"config": format_config(c), **result.to_dict()})
        self._write("game.json", lambda handle: handle.write(json.dumps(report, indent=2, ensure_ascii=False) + "\n"))

        path = write_prior(result.worst_prior, self.output_dir / "worst_prior.txt", self.echo)
        self.written.append(path)
        logger.info("✅ Записан файл %s", path)

    def run_audit(self) -> None:
        prior = read_prior(self.config.prior_path)
        audit = audit_equivalence(prior, self.config.solver_config())
        self.write_summary("audit.txt", {
            "root_v1": audit.root_v1,
            "root_v2": audit.root_v2,
            "max_relative_discrepancy": audit.max_relative_discrepancy,
            "compared_states": audit.compared_states,
            "skipped_states": audit.skipped_states,
        })

    def run(self) -> list[Path]:
        handler = getattr(self, f"run_{self.config.command}")
        logger.info("Запуск команды %s, вывод в %s", self.config.command, self.output_dir)
        handler()
        return list(self.written)


def run(config: RunConfig) -> list[Path]:
    return BanditRunService(config).run()


def run_file(command: str, config_path: Path) -> list[Path]:
    """Разбор файла конфигурации и запуск; ошибки наследуют BanditError."""
    return run(parse_config(_read_text(config_path), command=command))
