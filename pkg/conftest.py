"""Configure Django for pytest, mirroring what manage.py does for ``manage.py test``."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')
django.setup()
