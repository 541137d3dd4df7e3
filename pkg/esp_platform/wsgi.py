"""
WSGI entry point for the esp_platform project (serves the read-only run index API).
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'esp_platform.settings')

application = get_wsgi_application()
