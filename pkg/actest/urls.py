from django.urls import path
from . import views

urlpatterns = [
    path('health/', views.health_check, name='health_check'),

    # Stored runs
    path('runs/', views.list_runs, name='list_runs'),
    path('runs/<int:run_id>/', views.get_run, name='get_run'),

    # Triage
    path('triage/', views.triage_entries, name='triage_entries'),
]
