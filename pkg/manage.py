#!/usr/bin/env python
"""Command-line utility for the poisson_bandit project (solver runs, tests)."""
import os
import sys


def main(argv=None):
    """Run management commands, e.g. ``manage.py poisson_bandit solve --config run.txt``."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Is it installed and available on your "
            "PYTHONPATH? Install the packages from requirements.txt."
        ) from exc
    execute_from_command_line(argv if argv is not None else sys.argv)


if __name__ == '__main__':
    main()
