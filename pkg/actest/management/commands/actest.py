"""
python manage.py actest <subcommand>

Exit codes: 0 success, 1 error, 2 dangerous impacts found, 3 CFG-diff found no divergence.
"""
import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from actest.acdl import load_config
from actest.datastate import OverlayStore, load_manifest
from actest.domain import Request
from actest.errors import ACTestError, ManifestError, NoCandidates
from actest.hir import dump_ir, load_ir
from actest.impact_service import ChangeSpec, ImpactService, load_data_delta
from actest.interpreter import DynCfg, trace_run
from actest.models import ImpactRun
from actest.reqgen import (
    dump_requests, load_requests, load_synthesis_spec, read_access_log, subject_directory, synthesize,
)
from actest.report_service import RuleSet, build_report, render_json, render_text, report_from_dict
from actest.trim_service import TrimService
from actest.trimmer import BackwardMode, find_divergence, find_final_acc

logger = logging.getLogger('actest')

EXIT_DANGEROUS = 2
EXIT_NO_CANDIDATES = 3


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"Cannot read {what} {path}: {e}") from e


def _write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"Cannot write {path}: {e}") from e


def _existing(base: Path, name: str, what: str) -> Path:
    path = (base / name) if not Path(name).is_absolute() else Path(name)
    if not path.exists():
        raise ManifestError(f"{what} not found: {path}")
    return path


class Command(BaseCommand):
    help = "Test access-control configuration changes before rolling them out"

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest='subcommand', required=True)

        run = subparsers.add_parser('run', help='Run a change-impact test from a manifest')
        run.add_argument('--manifest', required=True)
        run.add_argument('--workers', type=int)
        run.add_argument('--rules')
        run.add_argument('--format', choices=['json', 'text'], default='text')
        run.add_argument('--out')

        trim = subparsers.add_parser('trim', help='Trim a handler program')
        trim.add_argument('--program', required=True)
        trim.add_argument('--mode', choices=['advanced', 'strawman'], default='advanced')
        trim.add_argument('--tuples')
        trim.add_argument('--data')
        trim.add_argument('--backward', choices=[m.value for m in BackwardMode], default=BackwardMode.PRIOR.value)
        trim.add_argument('--report')
        trim.add_argument('--out', required=True)

        cfg_diff = subparsers.add_parser('cfg-diff', help='Locate the final ACC of an allow/deny CFG pair')
        cfg_diff.add_argument('--allow', required=True)
        cfg_diff.add_argument('--deny', required=True)
        cfg_diff.add_argument('--program')
        cfg_diff.add_argument('--dot')

        synth = subparsers.add_parser('synthesize', help='Synthesize a request corpus')
        synth.add_argument('--spec', required=True)
        synth.add_argument('--data', required=True)
        synth.add_argument('--change-old')
        synth.add_argument('--change-new')
        synth.add_argument('--data-delta')
        synth.add_argument('--out', required=True)

        replay = subparsers.add_parser('replay', help='Turn an access log into a request corpus')
        replay.add_argument('--log', required=True)
        replay.add_argument('--out', required=True)
        replay.add_argument('--rejected')
        replay.add_argument('--data', help='Data manifest whose users table supplies subject groups')

        retriage = subparsers.add_parser('triage', help='Triage a stored impact report again')
        retriage.add_argument('--report', required=True)
        retriage.add_argument('--rules')
        retriage.add_argument('--format', choices=['json', 'text'], default='text')

        trace = subparsers.add_parser('trace', help='Record the dynamic CFG of one request')
        trace.add_argument('--program', required=True)
        trace.add_argument('--config', required=True)
        trace.add_argument('--data', required=True)
        trace.add_argument('--request', required=True, help='Request JSON, inline or a file path')
        trace.add_argument('--seed', type=int, default=0)
        trace.add_argument('--dot')
        trace.add_argument('--out', required=True)

    def handle(self, *args, **options):
        handler = getattr(self, 'handle_' + options['subcommand'].replace('-', '_'))
        try:
            handler(options)
        except NoCandidates as e:
            logger.error(f"CFG-diff: {e}")
            raise CommandError(str(e), returncode=EXIT_NO_CANDIDATES)
        except ACTestError as e:
            logger.error(f"{options['subcommand']} failed: {e}")
            raise CommandError(str(e), returncode=1)

    # ========================
    # run
    # ========================
    def handle_run(self, options):
        from actest.serializers import RunManifestSerializer

        manifest_path = Path(options['manifest'])
        if not manifest_path.exists():
            raise ManifestError(f"Run manifest not found: {manifest_path}")
        serializer = RunManifestSerializer(data=_read_json(manifest_path, "run manifest"))
        if not serializer.is_valid():
            raise ManifestError(f"Invalid run manifest {manifest_path}: {serializer.errors}")
        manifest = serializer.validated_data
        base = manifest_path.parent
        started = timezone.now()

        prog = load_ir(_existing(base, manifest['program'], "Program"))
        config_old = load_config(_existing(base, manifest['config_old'], "Old config"))
        config_new = load_config(_existing(base, manifest['config_new'], "New config"))
        lower = load_manifest(_existing(base, manifest['data'], "Data manifest"))
        delta = ()
        if manifest.get('data_delta'):
            delta = load_data_delta(_existing(base, manifest['data_delta'], "Data delta"))
        change = ChangeSpec(config_old, config_new, delta)

        source, location = next(iter(manifest['requests'].items()))
        if source == 'logs':
            subjects = subject_directory(OverlayStore(lower))
            requests, _ = read_access_log(_existing(base, location, "Access log"), subjects)
        elif source == 'synthesize':
            spec = load_synthesis_spec(_existing(base, location, "Synthesis spec"))
            requests = synthesize(spec, OverlayStore(lower), change)
        else:
            requests = load_requests(_existing(base, location, "Request corpus"))

        workers = options.get('workers') or manifest.get('workers')
        tested_prog = prog
        if manifest['trim'] == 'advanced':
            tuples = TrimService.load_tuples(_existing(base, manifest['tuples'], "Trace tuples"))
            tested_prog, _, _ = TrimService.advanced(prog, tuples, lower)
        elif manifest['trim'] == 'strawman':
            tested_prog = TrimService.strawman(prog)

        impacts = ImpactService.compute_impact(tested_prog, change, lower, requests, workers)
        if tested_prog is not prog:
            impacts = ImpactService.confirm_impacts(prog, impacts, change, lower, workers)

        rules_path = options.get('rules') or (manifest.get('rules') and str(base / manifest['rules']))
        rules = RuleSet.load(rules_path) if rules_path else RuleSet.default()
        meta = {
            'manifest': str(manifest_path),
            'program': manifest['program'],
            'config_old': config_old.config_id,
            'config_new': config_new.config_id,
            'data': lower.digest(),
            'requests': len(requests),
            'trim': manifest['trim'],
        }
        report = build_report(impacts, rules, tested={r.object for r in requests}, meta=meta)

        out = options.get('out') or (manifest.get('output') and str(base / manifest['output']))
        if out:
            _write_text(out, render_json(report))
            _write_text(Path(out).with_suffix('.txt'), render_text(report))
            logger.info(f"Wrote impact report to {out}")
        self.stdout.write(render_json(report) if options['format'] == 'json' else render_text(report))

        exit_code = EXIT_DANGEROUS if report.dangerous else 0
        if getattr(settings, 'ACTEST_RECORD_RUNS', True):
            ImpactRun.objects.create(
                manifest_path=str(manifest_path),
                started_at=started,
                finished_at=timezone.now(),
                request_count=len(requests),
                impact_count=len(report.impacts),
                dangerous_count=len(report.dangerous),
                exit_code=exit_code,
                report=report.to_dict(),
            )
        if exit_code:
            raise CommandError(f"{len(report.dangerous)} dangerous impact entries", returncode=exit_code)

    # ========================
    # trim
    # ========================
    def handle_trim(self, options):
        prog = load_ir(options['program'])
        if options['mode'] == 'strawman':
            trimmed = TrimService.strawman(prog)
            _write_text(options['out'], dump_ir(trimmed))
            self.stdout.write(f"Strawman-trimmed program written to {options['out']}")
            return

        if not options.get('tuples') or not options.get('data'):
            raise ManifestError("Advanced trimming needs --tuples and --data")
        tuples = TrimService.load_tuples(options['tuples'])
        lower = load_manifest(options['data'])
        trimmed, finals, report = TrimService.advanced(prog, tuples, lower, BackwardMode(options['backward']))
        _write_text(options['out'], dump_ir(trimmed))
        report_path = options.get('report') or f"{options['out']}.accs.json"
        _write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
        self.stdout.write(
            f"Advanced-trimmed program written to {options['out']} "
            f"({len(finals)} probes: {', '.join(finals.check_ids())})"
        )

    # ========================
    # cfg-diff
    # ========================
    def handle_cfg_diff(self, options):
        allow = DynCfg.from_json(_read_json(Path(options['allow']), "allow trace"))
        deny = DynCfg.from_json(_read_json(Path(options['deny']), "deny trace"))

        if options.get('program'):
            acc, merged = find_final_acc(allow, deny, load_ir(options['program']))
            winner = {'function': acc.function, 'block': acc.block}
            final_acc = acc.to_dict()
        else:
            node, merged, _ = find_divergence(allow, deny)
            winner = {'function': node[0], 'block': node[1]}
            final_acc = None
            logger.warning("cfg-diff without --program reports the divergence block only")

        if options.get('dot'):
            merged.to_dot(options['dot'])
        result = {'coloring': merged.summary(), 'winner': winner, 'final_acc': final_acc}
        if final_acc is None:
            result['final_acc_note'] = 'resolving the final ACC needs --program'
        self.stdout.write(json.dumps(result, indent=2, sort_keys=True))

    # ========================
    # request corpora
    # ========================
    def handle_synthesize(self, options):
        lower = load_manifest(options['data'])
        change = None
        if options.get('change_old') or options.get('change_new'):
            if not (options.get('change_old') and options.get('change_new')):
                raise ManifestError("--change-old and --change-new go together")
            delta = load_data_delta(options['data_delta']) if options.get('data_delta') else ()
            change = ChangeSpec(load_config(options['change_old']), load_config(options['change_new']), delta)
        spec = load_synthesis_spec(options['spec'])
        requests = synthesize(spec, OverlayStore(lower), change)
        dump_requests(requests, options['out'])
        self.stdout.write(f"Synthesized {len(requests)} requests into {options['out']}")

    def handle_replay(self, options):
        subjects = subject_directory(OverlayStore(load_manifest(options['data']))) if options.get('data') else None
        requests, rejected = read_access_log(options['log'], subjects)
        dump_requests(requests, options['out'])
        rejected_path = options.get('rejected') or f"{options['out']}.rejected.json"
        payload = {'rejected': [{'line': lineno, 'text': text} for lineno, text in rejected]}
        _write_text(rejected_path, json.dumps(payload, indent=2) + "\n")
        self.stdout.write(f"Replayed {len(requests)} requests into {options['out']} ({len(rejected)} rejected)")

    # ========================
    # triage
    # ========================
    def handle_triage(self, options):
        data = _read_json(Path(options['report']), "impact report")
        rules = RuleSet.load(options['rules']) if options.get('rules') else RuleSet.default()
        report = report_from_dict(data, rules)
        self.stdout.write(render_json(report) if options['format'] == 'json' else render_text(report))
        if report.dangerous:
            raise CommandError(f"{len(report.dangerous)} dangerous impact entries", returncode=EXIT_DANGEROUS)

    # ========================
    # trace
    # ========================
    def handle_trace(self, options):
        prog = load_ir(options['program'])
        cfg = load_config(options['config'])
        lower = load_manifest(options['data'])

        raw = options['request']
        request_path = Path(raw)
        try:
            data = _read_json(request_path, "request") if request_path.exists() else json.loads(raw)
            req = Request.from_dict(data)
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            raise ManifestError(f"Invalid request {raw!r}: {e}") from e

        result, dyn = trace_run(prog, req, cfg, OverlayStore(lower), nondet_seed=options['seed'])
        _write_text(options['out'], dyn.dumps() + "\n")
        if options.get('dot'):
            dyn.to_dot(options['dot'])
        self.stdout.write(
            f"{req.action} {req.object}: {result.decision.value} (code {result.return_code}, "
            f"cost {result.cost}, {dyn.graph.number_of_nodes()} nodes)"
        )
