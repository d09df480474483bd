import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from bandit_app.exceptions import BanditError
from bandit_app.services.run_service import COMMANDS, exit_status, run_file


logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = (
        "Решатель пуассоновского двурукого бандита: solve, linearized, evaluate, "
        "simulate, minimax, audit. Параметры запуска читаются из файла key = value."
    )

    def add_arguments(self, parser):
        parser.add_argument("command", choices=COMMANDS)
        parser.add_argument("--config", required=True, type=Path, help="Файл запуска key = value")

    def handle(self, *args, **options):
        try:
            written = run_file(options["command"], options["config"])
        except BanditError as e:
            logger.error("Команда %s завершилась ошибкой: %s", options["command"], e)
            raise CommandError(str(e), returncode=exit_status(e)) from e
        for path in written:
            self.stdout.write(str(path))
