import django_filters
from .models import ExperimentRun, CheckResult

class ExperimentRunFilter(django_filters.FilterSet):
    pipeline = django_filters.CharFilter(lookup_expr="iexact")
    status = django_filters.CharFilter(lookup_expr="iexact")
    config_hash = django_filters.CharFilter(field_name="config_hash", lookup_expr="startswith")
    seed = django_filters.NumberFilter(field_name="seed", lookup_expr="exact")
    started_at__gte = django_filters.DateTimeFilter(field_name="started_at", lookup_expr="gte")
    started_at__lte = django_filters.DateTimeFilter(field_name="started_at", lookup_expr="lte")

    class Meta:
        model = ExperimentRun
        fields = ["pipeline", "status", "config_hash", "seed"]

class CheckResultFilter(django_filters.FilterSet):
    name = django_filters.CharFilter(lookup_expr="icontains")
    passed = django_filters.BooleanFilter(field_name="passed")
    run_config_hash = django_filters.CharFilter(field_name="run__config_hash", lookup_expr="startswith")
    value__lte = django_filters.NumberFilter(field_name="value", lookup_expr="lte")

    class Meta:
        model = CheckResult
        fields = ["name", "passed"]
