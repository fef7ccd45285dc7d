import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ExperimentRun",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("pipeline", models.CharField(max_length=32)),
                ("seed", models.PositiveBigIntegerField(default=0)),
                ("config_hash", models.CharField(blank=True, db_index=True, max_length=64)),
                ("physics_hash", models.CharField(blank=True, max_length=64)),
                ("status", models.CharField(
                    choices=[("pending", "Pending"), ("running", "Running"), ("passed", "Passed"),
                             ("failed", "Failed"), ("error", "Error")],
                    default="pending", max_length=16)),
                ("out_dir", models.CharField(blank=True, max_length=500)),
                ("workers", models.PositiveIntegerField(default=1)),
                ("replicas", models.PositiveIntegerField(default=0)),
                ("started_at", models.DateTimeField(blank=True, null=True)),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
                ("message", models.TextField(blank=True)),
            ],
            options={"ordering": ["-id"]},
        ),
        migrations.CreateModel(
            name="CheckResult",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("name", models.CharField(max_length=100)),
                ("passed", models.BooleanField()),
                ("value", models.FloatField(blank=True, null=True)),
                ("threshold", models.FloatField(blank=True, null=True)),
                ("details", models.JSONField(blank=True, default=dict)),
                ("run", models.ForeignKey(on_delete=django.db.models.deletion.CASCADE,
                                          related_name="checks", to="kinetics.experimentrun")),
            ],
        ),
    ]
