from django.apps import AppConfig


class BanditAppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'bandit_app'
    verbose_name = 'Poisson two-armed bandit'
