import json

from django.contrib import admin
from django.utils.html import format_html
from django.utils.safestring import mark_safe

from .models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ['id', 'kind', 'task', 'algorithm', 'status_display', 'row_count', 'created_at']
    list_filter = ['kind', 'status', 'task', 'created_at']
    search_fields = ['kind', 'task', 'algorithm', 'error']
    ordering = ['-created_at']
    readonly_fields = [
        'created_at', 'updated_at', 'status', 'exit_code', 'error',
        'config_display', 'report_display', 'rows_summary',
    ]

    fieldsets = (
        ('Experiment', {
            'fields': ('kind', 'task', 'algorithm', 'config_display')
        }),
        ('Results', {
            'fields': ('status', 'exit_code', 'error', 'report_display', 'rows_summary'),
            'classes': ('collapse',)
        }),
        ('Metadata', {
            'fields': ('created_at', 'updated_at'),
            'classes': ('collapse',)
        }),
    )

    def status_display(self, obj):
        if obj.status == 'succeeded':
            return mark_safe('<span style="color:green;font-weight:bold;">✓ Succeeded</span>')
        if obj.status == 'failed':
            return format_html('<span style="color:red;">✗ Failed (exit {})</span>', obj.exit_code)
        return mark_safe('<span style="color:orange;">⚠ Pending</span>')
    status_display.short_description = "Status"

    def row_count(self, obj):
        return len(obj.rows or [])
    row_count.short_description = "Rows"

    def _json_block(self, data):
        if not data:
            return "-"
        return format_html(
            '<pre style="background:#f4f4f4;padding:10px;border-radius:5px;">{}</pre>',
            json.dumps(data, indent=2),
        )

    def config_display(self, obj):
        return self._json_block(obj.config)
    config_display.short_description = "Config"

    def report_display(self, obj):
        return self._json_block(obj.report)
    report_display.short_description = "Report"

    def rows_summary(self, obj):
        rows = obj.rows or []
        if not rows:
            return "-"
        columns = list(rows[0].keys())
        html = "<table style='border-collapse:collapse;'><tr>"
        html += ''.join(f"<th style='padding:4px 8px;border:1px solid #ccc;'>{c}</th>" for c in columns)
        html += "</tr>"
        for row in rows[:20]:
            html += "<tr>" + ''.join(
                f"<td style='padding:4px 8px;border:1px solid #ccc;text-align:right;'>{row.get(c, '')}</td>"
                for c in columns
            ) + "</tr>"
        html += "</table>"
        if len(rows) > 20:
            html += f"<p>… {len(rows) - 20} more row(s); use the CSV export.</p>"
        return mark_safe(html)
    rows_summary.short_description = "Rows"


admin.site.site_header = "PnP Contraction Toolkit Administration"
admin.site.site_title = "PnP Admin"
admin.site.index_title = "Experiments"
