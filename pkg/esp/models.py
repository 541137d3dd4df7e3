from django.db import models

from .choices import Domain, Method


class TimeStamped(models.Model):
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        abstract = True


class ExperimentRun(TimeStamped):
    """Index row for one run archive on disk; the archive stays the source of truth."""

    method = models.CharField(max_length=8, choices=Method.choices)
    domain = models.CharField(max_length=16, choices=Domain.choices)
    seed = models.PositiveIntegerField()
    archive_path = models.CharField(max_length=500, unique=True)

    episodes_consumed = models.PositiveIntegerField(default=0)
    final_true_performance = models.FloatField(null=True, blank=True)
    best_real_fitness = models.FloatField(null=True, blank=True)
    # first episode count where true performance crossed the success threshold
    episodes_to_target = models.PositiveIntegerField(null=True, blank=True)

    config = models.JSONField(default=dict)

    class Meta:
        ordering = ("domain", "method", "seed")
        indexes = [models.Index(fields=["domain", "method"], name="esp_run_domain_method_idx")]

    def __str__(self):
        return f"{self.method}/{self.domain} seed={self.seed}"

    @property
    def solved(self) -> bool:
        return self.episodes_to_target is not None
