from django.apps import AppConfig


class AdaptationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.adaptation'
    verbose_name = 'Cross-modality domain adaptation'
