# Generated by Django 4.2.26 on 2026-10-19 09:00

from django.db import migrations, models
import django.utils.timezone


class Migration(migrations.Migration):
    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ImpactRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("manifest_path", models.CharField(max_length=1024)),
                (
                    "started_at",
                    models.DateTimeField(
                        db_index=True, default=django.utils.timezone.now
                    ),
                ),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
                ("request_count", models.IntegerField(default=0)),
                ("impact_count", models.IntegerField(default=0)),
                ("dangerous_count", models.IntegerField(default=0)),
                ("exit_code", models.IntegerField(default=0)),
                ("report", models.JSONField(blank=True, null=True)),
            ],
            options={
                "ordering": ["-started_at"],
            },
        ),
    ]
