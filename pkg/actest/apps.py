from django.apps import AppConfig


class ActestConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "actest"
    verbose_name = "Access-control change tests"
