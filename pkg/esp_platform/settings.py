"""
Django settings for the esp_platform project.

Process-level knobs for experiments come from the environment:

    ESP_THREADS       upper bound on worker threads per run (default 1)
    ESP_OUTPUT_DIR    default archive directory for `manage.py esp run`
    ESP_LOG_LEVEL     level of the "esp" logger (default INFO)
    ESP_INDEX_DB      sqlite file backing the run index
"""
import os
from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'DJANGO_SECRET_KEY', 'django-insecure-esp-platform-local-development-only'
)

DEBUG = os.environ.get('DJANGO_DEBUG', '1') == '1'

ALLOWED_HOSTS = [h for h in os.environ.get('DJANGO_ALLOWED_HOSTS', '').split(',') if h]


INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'rest_framework',
    'drf_spectacular',
    'esp',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'esp_platform.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'esp_platform.wsgi.application'


# run index only; archives on disk stay the source of truth
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.environ.get('ESP_INDEX_DB', BASE_DIR / 'esp_index.sqlite3'),
    }
}

TIME_ZONE = 'UTC'
USE_TZ = True

STATIC_URL = 'static/'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

REST_FRAMEWORK = {
    "DEFAULT_SCHEMA_CLASS": "drf_spectacular.openapi.AutoSchema",
    'DEFAULT_PERMISSION_CLASSES': ['rest_framework.permissions.AllowAny'],
    'DEFAULT_PAGINATION_CLASS': 'rest_framework.pagination.LimitOffsetPagination',
    'PAGE_SIZE': 100,
}

SPECTACULAR_SETTINGS = {
    "TITLE": "ESP Run Index",
    "DESCRIPTION": "Read-only access to archived prescription experiments and their aggregated curves",
    "VERSION": "1.0.0",
}


# Experiments
ESP_THREADS = max(1, int(os.environ.get('ESP_THREADS', '1')))
ESP_OUTPUT_DIR = os.environ.get('ESP_OUTPUT_DIR', 'runs')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {'format': '%(asctime)s %(levelname)s %(name)s: %(message)s'},
    },
    'handlers': {
        'console': {'class': 'logging.StreamHandler', 'formatter': 'plain'},
    },
    'loggers': {
        'esp': {
            'handlers': ['console'],
            'level': os.environ.get('ESP_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
