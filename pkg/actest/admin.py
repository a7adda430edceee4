from django.contrib import admin

from .models import ImpactRun


@admin.register(ImpactRun)
class ImpactRunAdmin(admin.ModelAdmin):
    list_display = ('manifest_path', 'started_at', 'request_count', 'impact_count', 'dangerous_count', 'exit_code')
    list_filter = ('exit_code',)
    search_fields = ('manifest_path',)
    readonly_fields = ('report',)
