from django.contrib import admin

from .models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = (
        "method",
        "domain",
        "seed",
        "episodes_consumed",
        "final_true_performance",
        "best_real_fitness",
        "solved_display",
        "created_at",
    )
    list_filter = ("domain", "method")
    search_fields = ("archive_path",)
    ordering = ("domain", "method", "seed")
    readonly_fields = ("config", "created_at", "updated_at")

    fieldsets = (
        ("Run", {"fields": (("method", "domain", "seed"), "archive_path")}),
        ("Results", {
            "fields": (
                "episodes_consumed",
                ("final_true_performance", "best_real_fitness"),
                "episodes_to_target",
            )
        }),
        ("Config", {"fields": ("config",)}),
    )

    @admin.display(description="Episodes to target")
    def solved_display(self, obj: ExperimentRun):
        return "-" if obj.episodes_to_target is None else obj.episodes_to_target
