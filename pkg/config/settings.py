"""
Django settings for the domain adaptation pipeline project.
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-default-key-change-in-production')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'apps.adaptation',
]

# Пайплайн работает только с файлами каталога запуска
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'ru-RU'
TIME_ZONE = 'UTC'
USE_I18N = True
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Каталог запусков: <UDA_RUN_ROOT>/run-seed<seed>, если run_dir не задан в конфиге
UDA_RUN_ROOT = Path(config('UDA_RUN_ROOT', default=str(BASE_DIR / 'runs')))

# Потоки torch и параллельных воркеров по умолчанию
UDA_THREADS = config('UDA_THREADS', default=1, cast=int)

UDA_LOG_LEVEL = config('UDA_LOG_LEVEL', default='INFO')
UDA_LOG_DIR = Path(config('UDA_LOG_DIR', default=str(BASE_DIR / 'logs')))
UDA_LOG_DIR.mkdir(parents=True, exist_ok=True)

# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': UDA_LOG_LEVEL,
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': UDA_LOG_DIR / 'pipeline.log',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'apps.adaptation': {
            'handlers': ['console', 'file'],
            'level': UDA_LOG_LEVEL,
            'propagate': False,
        },
    },
    'root': {
        'handlers': ['file'],
    },
}
