from django.db import models


class ExperimentRun(models.Model):
    class Status(models.TextChoices):
        PENDING = "pending"
        RUNNING = "running"
        PASSED = "passed"
        FAILED = "failed"
        ERROR = "error"

    pipeline = models.CharField(max_length=32)
    seed = models.PositiveBigIntegerField(default=0)
    config_hash = models.CharField(max_length=64, blank=True, db_index=True)
    physics_hash = models.CharField(max_length=64, blank=True)
    status = models.CharField(max_length=16, choices=Status.choices, default=Status.PENDING)
    out_dir = models.CharField(max_length=500, blank=True)
    workers = models.PositiveIntegerField(default=1)
    replicas = models.PositiveIntegerField(default=0)
    started_at = models.DateTimeField(null=True, blank=True)
    finished_at = models.DateTimeField(null=True, blank=True)
    message = models.TextField(blank=True)

    class Meta:
        ordering = ["-id"]

    def __str__(self):
        return f"{self.pipeline} {self.config_hash[:12]} ({self.status})"


class CheckResult(models.Model):
    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name="checks")
    name = models.CharField(max_length=100)
    passed = models.BooleanField()
    value = models.FloatField(null=True, blank=True)
    threshold = models.FloatField(null=True, blank=True)
    details = models.JSONField(default=dict, blank=True)

    def __str__(self):
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'}"
