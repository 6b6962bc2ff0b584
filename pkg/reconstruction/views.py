import csv
import logging

from django.core.paginator import Paginator
from django.db.models import Q
from django.http import HttpResponse
from rest_framework import status
from rest_framework.decorators import api_view
from rest_framework.response import Response

from .exceptions import ConfigError, ImageIOError, ReconstructionError, SolverError, VerificationError
from .experiments import EXPERIMENT_KINDS, execute, json_safe
from .models import ExperimentRun
from .serializers import ExperimentConfigSerializer, ExperimentRunListSerializer, ExperimentRunSerializer

logger = logging.getLogger(__name__)

ERROR_STATUS = (
    (ConfigError, status.HTTP_400_BAD_REQUEST),
    (VerificationError, status.HTTP_422_UNPROCESSABLE_ENTITY),
    (ImageIOError, status.HTTP_400_BAD_REQUEST),
    (SolverError, status.HTTP_500_INTERNAL_SERVER_ERROR),
)


def _status_for(error):
    for error_class, code in ERROR_STATUS:
        if isinstance(error, error_class):
            return code
    return status.HTTP_500_INTERNAL_SERVER_ERROR


@api_view(['POST'])
def run_experiment(request, kind):
    if kind not in EXPERIMENT_KINDS:
        return Response({'error': f"Unknown experiment kind '{kind}'"}, status=status.HTTP_404_NOT_FOUND)

    serializer = ExperimentConfigSerializer(data=request.data)
    if not serializer.is_valid():
        return Response(serializer.errors, status=status.HTTP_400_BAD_REQUEST)
    config = serializer.save()

    run = ExperimentRun.objects.create(
        kind=kind,
        task=config.task.value,
        algorithm=config.algorithm.value if kind in ('reconstruct', 'sweep') else '',
        config=json_safe(request.data),
    )
    try:
        report, rows = execute(kind, config)
    except ReconstructionError as e:
        logger.warning("Run #%d (%s) failed: %s", run.id, kind, e)
        failing = json_safe(getattr(e, 'rows', []))
        run.save_failure(e, rows=failing)
        body = {'run_id': run.id, 'error': str(e)}
        if failing:
            body['rows'] = failing
        return Response(body, status=_status_for(e))

    run.save_results(report=report, rows=rows)
    logger.info("Run #%d (%s) stored with %d row(s)", run.id, kind, len(rows))
    return Response({'run_id': run.id, 'report': report, 'rows': rows}, status=status.HTTP_201_CREATED)


@api_view(['GET'])
def list_runs(request):
    search_query = request.GET.get('q', '')
    page_number = request.GET.get('page', 1)
    page_size = request.GET.get('page_size', 10)

    runs = ExperimentRun.objects.all()
    if search_query:
        runs = runs.filter(
            Q(kind__icontains=search_query) |
            Q(task__icontains=search_query) |
            Q(algorithm__icontains=search_query)
        )

    paginator = Paginator(runs, page_size)
    page_obj = paginator.get_page(page_number)
    serializer = ExperimentRunListSerializer(page_obj, many=True)

    return Response({
        'runs': serializer.data,
        'total_count': paginator.count,
        'total_pages': paginator.num_pages,
        'current_page': page_obj.number,
        'has_next': page_obj.has_next(),
        'has_previous': page_obj.has_previous(),
    })


@api_view(['GET'])
def get_run(request, run_id):
    try:
        run = ExperimentRun.objects.get(id=run_id)
    except ExperimentRun.DoesNotExist:
        return Response({'error': 'Run not found'}, status=status.HTTP_404_NOT_FOUND)
    return Response(ExperimentRunSerializer(run).data)


@api_view(['DELETE'])
def delete_run(request, run_id):
    try:
        run = ExperimentRun.objects.get(id=run_id)
    except ExperimentRun.DoesNotExist:
        return Response({'error': 'Run not found'}, status=status.HTTP_404_NOT_FOUND)
    run.delete()
    return Response({'message': 'Run deleted successfully'}, status=status.HTTP_204_NO_CONTENT)


@api_view(['GET'])
def export_run_csv(request, run_id):
    try:
        run = ExperimentRun.objects.get(id=run_id)
    except ExperimentRun.DoesNotExist:
        return Response({'error': 'Run not found'}, status=status.HTTP_404_NOT_FOUND)

    response = HttpResponse(content_type='text/csv')
    response['Content-Disposition'] = f'attachment; filename="run_{run_id}_{run.kind}.csv"'
    rows = run.rows or []
    columns = list(rows[0].keys()) if rows else []
    writer = csv.DictWriter(response, fieldnames=columns, extrasaction='ignore')
    if columns:
        writer.writeheader()
        for row in rows:
            writer.writerow({key: '' if value is None else value for key, value in row.items()})
    return response
