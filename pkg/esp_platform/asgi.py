"""
ASGI entry point for the esp_platform project (serves the read-only run index API).
"""

import os

from django.core.asgi import get_asgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'esp_platform.settings')

application = get_asgi_application()
