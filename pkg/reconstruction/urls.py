from django.urls import path
from . import views

urlpatterns = [
    path('experiments/', views.list_runs, name='list_runs'),
    path('experiments/<int:run_id>/', views.get_run, name='get_run'),
    path('experiments/<int:run_id>/delete/', views.delete_run, name='delete_run'),
    path('experiments/<int:run_id>/csv/', views.export_run_csv, name='export_run_csv'),
    path('experiments/<str:kind>/', views.run_experiment, name='run_experiment'),
]
