"""
Django settings for the poisson_bandit project.

The project has no web surface and no database: Django provides the
settings layer, logging configuration, management commands and the test
runner for the solver in ``bandit_app``.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'poisson-bandit-local-only')

DEBUG = os.environ.get('DJANGO_DEBUG', '') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'bandit_app',
]

MIDDLEWARE = []

DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'ru-ru'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Solver defaults, used when a run file omits the key

POISSON_BANDIT = {
    'TAIL_EPS': float(os.environ.get('POISSON_BANDIT_TAIL_EPS', 1e-10)),
    'TIE_RULE': 'prefer-arm-1',
    'SEED': 0,
    'STOP_RUN': 5,
    'MAX_ITERATIONS': 200,
    'GAP_TOL': 1e-6,
    'WORKERS': int(os.environ.get('POISSON_BANDIT_WORKERS', 1)),
    'OUTPUT_DIR': os.environ.get('POISSON_BANDIT_OUTPUT_DIR', '.'),
}


# Logging

LOG_LEVEL = os.environ.get('POISSON_BANDIT_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'bandit_app': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}
