from __future__ import annotations

from drf_spectacular.utils import OpenApiParameter, OpenApiTypes, extend_schema
from rest_framework import status, viewsets
from rest_framework.decorators import action
from rest_framework.response import Response

from .exceptions import ArchiveError, ConfigError
from .models import ExperimentRun
from .serializers import CurveQuerySerializer, ExperimentRunSerializer
from .services import curve_for


@extend_schema(tags=["Runs"])
class ExperimentRunViewSet(viewsets.ReadOnlyModelViewSet):
    """
    Registered experiment runs (see `manage.py esp report --register`).
    Includes:
    - /runs/curve/ → mean/std curve over the matching runs' archives
    """
    serializer_class = ExperimentRunSerializer

    def get_queryset(self):
        qs = ExperimentRun.objects.all()
        domain = self.request.query_params.get("domain")
        method = self.request.query_params.get("method")
        if domain:
            qs = qs.filter(domain=domain)
        if method:
            qs = qs.filter(method=method)
        return qs

    @extend_schema(
        parameters=[
            OpenApiParameter("domain", OpenApiTypes.STR, OpenApiParameter.QUERY, required=False),
            OpenApiParameter("method", OpenApiTypes.STR, OpenApiParameter.QUERY, required=False),
        ],
    )
    def list(self, request, *args, **kwargs):
        return super().list(request, *args, **kwargs)

    @extend_schema(
        parameters=[
            OpenApiParameter("domain", OpenApiTypes.STR, OpenApiParameter.QUERY, required=True),
            OpenApiParameter("method", OpenApiTypes.STR, OpenApiParameter.QUERY, required=True),
            OpenApiParameter("metric", OpenApiTypes.STR, OpenApiParameter.QUERY, required=False),
        ],
        responses={200: OpenApiTypes.OBJECT, 400: OpenApiTypes.OBJECT, 404: OpenApiTypes.OBJECT},
        description="Aggregate the archived series of every registered run for one domain and method.",
    )
    @action(detail=False, methods=["get"], url_path="curve")
    def curve(self, request):
        query = CurveQuerySerializer(data=request.query_params)
        query.is_valid(raise_exception=True)
        d = query.validated_data

        runs = ExperimentRun.objects.filter(domain=d["domain"], method=d["method"])
        if not runs.exists():
            return Response(
                {"detail": "No registered runs for this domain and method."},
                status=status.HTTP_404_NOT_FOUND,
            )
        try:
            table = curve_for(runs, d["metric"])
        except (ArchiveError, ConfigError) as exc:
            return Response({"detail": str(exc)}, status=status.HTTP_400_BAD_REQUEST)

        return Response({
            "domain": table.domain,
            "method": table.method,
            "metric": table.metric,
            "rows": table.as_dicts(),
        }, status=status.HTTP_200_OK)
