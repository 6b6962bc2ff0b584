from django.db import models


class ExperimentRun(models.Model):
    KINDS = (
        ('reconstruct', 'Reconstruct'),
        ('sweep', 'Sweep'),
        ('counterexample', 'Counterexample'),
        ('denoise', 'Denoise'),
        ('verify', 'Verify'),
    )
    STATUSES = (
        ('pending', 'Pending'),
        ('succeeded', 'Succeeded'),
        ('failed', 'Failed'),
    )

    kind = models.CharField(max_length=20, choices=KINDS)
    status = models.CharField(max_length=20, choices=STATUSES, default='pending')
    task = models.CharField(max_length=20, blank=True, default='')
    algorithm = models.CharField(max_length=20, blank=True, default='')

    # The validated JSON document the run was started from
    config = models.JSONField(default=dict)

    # Results
    report = models.JSONField(null=True, blank=True)
    rows = models.JSONField(default=list, blank=True)
    error = models.TextField(blank=True, default='')
    exit_code = models.IntegerField(default=0)

    # Metadata
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']
        verbose_name = 'Experiment run'
        verbose_name_plural = 'Experiment runs'

    def __str__(self):
        label = f" {self.task}/{self.algorithm}" if self.task else ''
        return f"Run #{self.id}: {self.kind}{label} ({self.status})"

    def save_results(self, report=None, rows=None):
        self.status = 'succeeded'
        self.report = report
        self.rows = rows or []
        self.error = ''
        self.exit_code = 0
        self.save()

    def save_failure(self, error, rows=None):
        self.status = 'failed'
        self.error = str(error)
        self.exit_code = getattr(error, 'exit_code', 1)
        self.rows = rows or []
        self.save()
