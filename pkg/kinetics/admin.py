from django.contrib import admin

from .models import CheckResult, ExperimentRun


class CheckResultInline(admin.TabularInline):
    model = CheckResult
    extra = 0
    readonly_fields = ("name", "passed", "value", "threshold", "details")


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ("id", "pipeline", "status", "seed", "config_hash", "started_at", "finished_at")
    list_filter = ("pipeline", "status")
    search_fields = ("config_hash", "physics_hash", "message")
    inlines = [CheckResultInline]


@admin.register(CheckResult)
class CheckResultAdmin(admin.ModelAdmin):
    list_display = ("name", "passed", "value", "threshold", "run")
    list_filter = ("passed",)
    search_fields = ("name",)
