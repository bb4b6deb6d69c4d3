"""
Django settings for the quantlab project.

Every value is read through python-decouple so a `.env` file or the process
environment can override it. The research defaults below are the values the
library falls back to when a run-config file leaves a key out.
"""

from pathlib import Path

from decouple import Csv, config
from django.core.management.utils import get_random_secret_key

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config("SECRET_KEY", default=get_random_secret_key(), cast=str)

DEBUG = int(config("DEBUG", default=False))

ALLOWED_HOSTS = config("ALLOWED_HOSTS", default="localhost", cast=Csv())

ENVIRONMENT = config("DJANGO_ENV", "development")


# Application definition

INSTALLED_APPS = [
    "market",
    "analytics",
    "research",
]

TEMPLATES = [
    {
        "BACKEND": "django.template.backends.django.DjangoTemplates",
        "DIRS": [],
        "APP_DIRS": True,
        "OPTIONS": {
            "context_processors": [],
        },
    },
]

# No relational storage: runs persist to JSON-lines files under RESEARCH["OUTPUT_DIR"].
DATABASES = {}


# Internationalization

LANGUAGE_CODE = "en-us"

TIME_ZONE = "Africa/Lagos"

USE_I18N = False

USE_TZ = True


# LOGGING
LOG_LEVEL = config("LOG_LEVEL", default="INFO")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name} {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "market": {"handlers": ["console"], "level": LOG_LEVEL, "propagate": False},
        "analytics": {"handlers": ["console"], "level": LOG_LEVEL, "propagate": False},
        "research": {"handlers": ["console"], "level": LOG_LEVEL, "propagate": False},
    },
}


# CELERY
CELERY_BROKER_URL = config("CELERY_BROKER_URL", default="redis://localhost:6379/1")
CELERY_RESULT_BACKEND = config("CELERY_RESULT_BACKEND", default="redis://localhost:6379/2")
CELERY_ACCEPT_CONTENT = ["application/json"]
CELERY_TASK_SERIALIZER = "json"
CELERY_RESULT_SERIALIZER = "json"
CELERY_TIMEZONE = TIME_ZONE
CELERY_RESULTS_EXTENDED = True


# RESEARCH defaults (overridable per run through a key-value config file)
RESEARCH = {
    "OUTPUT_DIR": config("RESEARCH_OUTPUT_DIR", default=str(BASE_DIR / "runs")),
    "SEED": config("RESEARCH_SEED", default=11, cast=int),
    "MAX_LOOPS": config("RESEARCH_MAX_LOOPS", default=20, cast=int),
    # 0 disables the wall-clock budget
    "WALL_CLOCK_SECONDS": config("RESEARCH_WALL_CLOCK_SECONDS", default=0.0, cast=float),
    "SCHEDULER": config("RESEARCH_SCHEDULER", default="bandit"),
    "GENERATOR": config("RESEARCH_GENERATOR", default="template"),
    # empty PANEL_PATH means a synthetic panel
    "PANEL_PATH": config("RESEARCH_PANEL_PATH", default=""),
    "DATA_SEED": config("RESEARCH_DATA_SEED", default=7, cast=int),
    # data pipeline
    "EPSILON": config("RESEARCH_EPSILON", default=1e-12, cast=float),
    "HORIZON_TAU": config("RESEARCH_HORIZON_TAU", default=1, cast=int),
    "WINDOW_ELL": config("RESEARCH_WINDOW_ELL", default=60, cast=int),
    # synthetic data
    "N_INSTRUMENTS": config("RESEARCH_N_INSTRUMENTS", default=100, cast=int),
    "N_DATES": config("RESEARCH_N_DATES", default=750, cast=int),
    "SIGNAL_STRENGTH": config("RESEARCH_SIGNAL_STRENGTH", default=0.6, cast=float),
    # walk-forward split
    "TRAIN_FRACTION": config("RESEARCH_TRAIN_FRACTION", default=0.6, cast=float),
    "VALID_FRACTION": config("RESEARCH_VALID_FRACTION", default=0.2, cast=float),
    "RIDGE_GRID": config(
        "RESEARCH_RIDGE_GRID", default="1e-6,1e-4,1e-2,1", cast=Csv(float)
    ),
    # strategy
    "STRATEGY_PRESET": config("RESEARCH_STRATEGY_PRESET", default="csi"),
    # Co-STEER
    "COSTEER_DELTA": config("RESEARCH_COSTEER_DELTA", default=0.5, cast=float),
    "SIM_THRESHOLD": config("RESEARCH_SIM_THRESHOLD", default=0.3, cast=float),
    "MAX_INNER_ITERS": config("RESEARCH_MAX_INNER_ITERS", default=10, cast=int),
    "MAX_OUTER_ROUNDS": config("RESEARCH_MAX_OUTER_ROUNDS", default=3, cast=int),
    # bandit
    "BANDIT_TAU": config("RESEARCH_BANDIT_TAU", default=1.0, cast=float),
    "BANDIT_SIGMA": config("RESEARCH_BANDIT_SIGMA", default=1.0, cast=float),
    "REWARD_MODE": config("RESEARCH_REWARD_MODE", default="delta"),
    # empty means uniform 1/8 weights
    "REWARD_WEIGHTS": config("RESEARCH_REWARD_WEIGHTS", default="", cast=Csv(float)),
    # validation
    "DEDUP_THRESHOLD": config("RESEARCH_DEDUP_THRESHOLD", default=0.99, cast=float),
    "ABS_DEDUP": config("RESEARCH_ABS_DEDUP", default=False, cast=bool),
    "DEDUP_CANDIDATES": config("RESEARCH_DEDUP_CANDIDATES", default=True, cast=bool),
}

LLM_GATEWAY = {
    "ENDPOINT": config("LLM_GATEWAY_ENDPOINT", default=""),
    "MODEL": config("LLM_GATEWAY_MODEL", default="gpt-4o"),
    "TOKEN_ENV": config("LLM_GATEWAY_TOKEN_ENV", default="ALPHALOOP_LLM_TOKEN"),
    "TEMPERATURE": config("LLM_GATEWAY_TEMPERATURE", default=0.8, cast=float),
    "MAX_TOKENS": config("LLM_GATEWAY_MAX_TOKENS", default=4096, cast=int),
    "TIMEOUT": config("LLM_GATEWAY_TIMEOUT", default=120.0, cast=float),
    "RETRIES": config("LLM_GATEWAY_RETRIES", default=2, cast=int),
    "REPLAY_DIR": config("LLM_GATEWAY_REPLAY_DIR", default=""),
    "MODE": config("LLM_GATEWAY_MODE", default="live"),
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"
