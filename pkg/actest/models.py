from django.db import models
from django.utils import timezone


class ImpactRun(models.Model):
    """Model to keep the history of change-impact runs"""

    manifest_path = models.CharField(max_length=1024)
    started_at = models.DateTimeField(default=timezone.now, db_index=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    request_count = models.IntegerField(default=0)
    impact_count = models.IntegerField(default=0)
    dangerous_count = models.IntegerField(default=0)
    exit_code = models.IntegerField(default=0)

    # Full ImpactReport JSON
    report = models.JSONField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.manifest_path} - {self.impact_count} impacts - {self.started_at}"

    @property
    def has_dangerous(self):
        return self.dangerous_count > 0
