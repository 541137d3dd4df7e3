from rest_framework.routers import DefaultRouter

from .views import ExperimentRunViewSet

# run-list, run-detail, run-curve
router = DefaultRouter()
router.register(r"runs", ExperimentRunViewSet, basename="run")

urlpatterns = router.urls
