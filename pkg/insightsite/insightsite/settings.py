"""
Django settings for the insightsite project.

The project has no web surface: Django provides configuration, logging,
management commands and the test runner for the ``insights`` app.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("DJANGO_SECRET_KEY", "insightdesk-local-only")

DEBUG = False

ALLOWED_HOSTS: list[str] = []


# Application definition

INSTALLED_APPS = [
    "insights",
]

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": BASE_DIR / "db.sqlite3",
    }
}

LANGUAGE_CODE = "ko-kr"

TIME_ZONE = "Asia/Seoul"

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Logging

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {
            "format": "{levelname} {name} {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "plain",
        },
    },
    "loggers": {
        "insights": {
            "handlers": ["console"],
            "level": os.environ.get("INSIGHTS_LOG_LEVEL", "WARNING"),
            "propagate": False,
        },
    },
}


# Insight engine defaults. Merged with --config files, environment and flags
# by insights.config.load_config; unknown keys there are rejected.

INSIGHTS = {
    "ingest": {
        "date_column": "date",
        "dimension_columns": [],
        "delimiter": ",",
    },
    "clean": {
        "strategy": "median",
        "cap_k": 3.0,
        "cap_outliers": False,
    },
    "detector": {
        "window": 28,
        "z_threshold": 3.0,
        "spike_ratio": 2.0,
        "spike_recovery_ratio": 1.5,
        "spike_recovery_span": 3,
        "min_history": 30,
        "top_n": 3,
        "comparison_delta": 0.25,
    },
    "chunk": {
        "strategy": "budget",
        "dimension": "",
        "budget_tokens": 8000,
    },
    "llm": {
        "api_url": "",
        "api_key": "",
        "model": "gpt-4",
        "timeout": 60.0,
        "max_retries": 3,
        "backoff": 1.0,
        "max_tokens": 2048,
        "temperature": 0.0,
    },
    "sim": {
        "seed": 0,
        "p_math_error": 0.0,
        "math_error_scale": 0.2,
        "p_hallucination": 0.0,
        "miss_rate": 0.0,
        "copy_error_factor": 1 / 3,
        "name_corruption_factor": 0.25,
    },
    "pipeline": {
        "anonymize": "auto",
        "precalc": True,
        "jobs": 0,
        "summary_budget_tokens": 100000,
        "protected_names": [],
        "prompt_overrides": {},
        "salt": "insightdesk",
    },
    "bench": {
        "days": 730,
        "modes": ["rule_only", "llm_only", "llm_chunked", "sequential", "hybrid"],
        "budget_fraction": 0.4,
        "p_math_error": 0.37,
        "p_hallucination": 0.12,
        "miss_rate": 0.0,
        "spikes": 6,
        "shifts": 6,
        "highs": 2,
        "noise": 0.02,
    },
    "report": {
        "title": "Business insight report",
        "empty_text": "No notable insights for this period.",
        "accent_color": "#2563eb",
        "text_color": "#111827",
        "base_font_size": 15,
    },
}
