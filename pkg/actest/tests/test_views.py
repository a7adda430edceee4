from django.test import TestCase
from rest_framework import status
from rest_framework.test import APIClient

from actest.domain import Decision
from actest.impact_service import Direction, ImpactTuple
from actest.models import ImpactRun
from actest.report_service import AggregateEntry, KeyKind

from .fixtures import request


def entry_dict(obj, kind=KeyKind.SUFFIX, value=None):
    impact = ImpactTuple.of(request(obj=obj), Decision.DENY, Decision.ALLOW)
    return AggregateEntry.of(kind, value or obj.rsplit("/", 1)[-1], Direction.DENY_TO_ALLOW, [impact]).to_dict()


class HealthTests(TestCase):

    def test_health(self):
        response = APIClient().get('/api/actest/health/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.json()['status'], 'healthy')


class RunViewTests(TestCase):

    def setUp(self):
        self.client = APIClient()
        self.safe = ImpactRun.objects.create(manifest_path='runs/identity.json', exit_code=0, report={'impacts': []})
        self.risky = ImpactRun.objects.create(
            manifest_path='runs/drupal_dumps.json', impact_count=4, dangerous_count=1, exit_code=2,
            report={'impacts': [], 'summary': {'dangerous': 1}},
        )

    def test_list_runs(self):
        response = self.client.get('/api/actest/runs/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        data = response.json()
        self.assertEqual(data['count'], 2)
        self.assertNotIn('report', data['runs'][0])

    def test_only_dangerous_runs(self):
        data = self.client.get('/api/actest/runs/', {'dangerous': '1'}).json()
        self.assertEqual(data['count'], 1)
        self.assertEqual(data['runs'][0]['id'], self.risky.id)

    def test_run_detail(self):
        response = self.client.get(f'/api/actest/runs/{self.risky.id}/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.json()['report']['summary'], {'dangerous': 1})

    def test_unknown_run(self):
        response = self.client.get('/api/actest/runs/999999/')
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)
        self.assertEqual(response.json(), {'error': 'Run not found', 'run_id': 999999})


class TriageViewTests(TestCase):

    def setUp(self):
        self.client = APIClient()

    def test_default_rules(self):
        response = self.client.post('/api/actest/triage/', {
            'entries': [entry_dict('/db/light.sql.gz', value='.sql.gz'), entry_dict('/docs/a.html', value='.html')],
        }, format='json')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        data = response.json()
        self.assertEqual(data['dangerous'], 1)
        self.assertEqual([r['severity'] for r in data['results']], ['DANGEROUS', 'LESS_DANGEROUS'])
        self.assertTrue(data['results'][0]['reasons'])

    def test_custom_rules(self):
        response = self.client.post('/api/actest/triage/', {
            'entries': [entry_dict('/docs/a.html', value='.html')],
            'rules': {'suffixes': ['.html']},
        }, format='json')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.json()['dangerous'], 1)

    def test_empty_entries(self):
        response = self.client.post('/api/actest/triage/', {'entries': []}, format='json')
        self.assertEqual(response.json(), {'results': [], 'dangerous': 0})

    def test_malformed_requests(self):
        for body in (
            {},
            {'entries': [{'key': {'kind': 'Planet', 'value': 'x'}}]},
            {'entries': [], 'rules': {'methods': ['FETCH']}},
        ):
            with self.subTest(body=body):
                response = self.client.post('/api/actest/triage/', body, format='json')
                self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
                self.assertEqual(response.json()['error'], 'Invalid triage request')
