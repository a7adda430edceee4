from rest_framework import status
from rest_framework.decorators import api_view
from rest_framework.response import Response
import logging

from .errors import ImpactError, RuleParseError
from .models import ImpactRun
from .report_service import AggregateEntry, RuleSet, triage
from .serializers import ImpactRunDetailSerializer, ImpactRunSerializer, TriageRequestSerializer

logger = logging.getLogger(__name__)


@api_view(['GET'])
def health_check(request):
    """
    Health check endpoint

    GET /api/actest/health/
    """
    return Response({
        'status': 'healthy',
        'service': 'Access-control change tests',
        'version': '1.0.0'
    }, status=status.HTTP_200_OK)


@api_view(['GET'])
def list_runs(request):
    """
    Stored impact runs, newest first

    GET /api/actest/runs/?dangerous=1
    """
    runs = ImpactRun.objects.all()
    if request.query_params.get('dangerous') in ('1', 'true'):
        runs = runs.filter(dangerous_count__gt=0)
    serializer = ImpactRunSerializer(runs, many=True)
    return Response({
        'count': runs.count(),
        'runs': serializer.data,
    }, status=status.HTTP_200_OK)


@api_view(['GET'])
def get_run(request, run_id):
    """
    One stored run with its full report

    GET /api/actest/runs/<id>/
    """
    try:
        run = ImpactRun.objects.get(pk=run_id)
    except ImpactRun.DoesNotExist:
        return Response(
            {'error': 'Run not found', 'run_id': run_id},
            status=status.HTTP_404_NOT_FOUND
        )
    return Response(ImpactRunDetailSerializer(run).data, status=status.HTTP_200_OK)


@api_view(['POST'])
def triage_entries(request):
    """
    Triage aggregate entries with the default or the given rule set

    POST /api/actest/triage/
    Body: {"entries": [<aggregate entry>, ...], "rules": {...}}

    Returns:
        200: severities per entry
        400: malformed entries or rules
    """
    serializer = TriageRequestSerializer(data=request.data)
    if not serializer.is_valid():
        return Response(
            {'error': 'Invalid triage request', 'details': serializer.errors},
            status=status.HTTP_400_BAD_REQUEST
        )

    try:
        rules_data = serializer.validated_data.get('rules')
        rules = RuleSet.from_dict(rules_data) if rules_data is not None else RuleSet.default()
        entries = [AggregateEntry.from_dict(item) for item in serializer.validated_data['entries']]
    except (RuleParseError, ImpactError) as e:
        logger.warning(f"Rejected triage request: {e}")
        return Response(
            {'error': 'Invalid triage request', 'details': str(e)},
            status=status.HTTP_400_BAD_REQUEST
        )

    results = triage(entries, rules)
    return Response({
        'results': [
            {
                'entry': item.entry.to_dict(),
                'severity': item.severity.value,
                'reasons': list(item.reasons),
            }
            for item in results
        ],
        'dangerous': sum(1 for item in results if item.severity.value == 'DANGEROUS'),
    }, status=status.HTTP_200_OK)
