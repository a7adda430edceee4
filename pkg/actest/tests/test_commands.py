import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings

from actest.hir import Probe, dump_ir, load_ir, parse_ir
from actest.models import ImpactRun

from .fixtures import SAMPLES

RUNS = SAMPLES / "runs"
REQUEST = '{"subject": "alice", "object": "/index.php", "action": "GET", "source_ip": "10.0.0.5"}'


class CommandTestCase(TestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def actest(self, *args):
        out = StringIO()
        call_command("actest", *args, stdout=out)
        return out.getvalue()

    def actest_fails(self, *args):
        with self.assertRaises(CommandError) as ctx:
            self.actest(*args)
        return ctx.exception.returncode


class RunCommandTests(CommandTestCase):

    def test_extension_install_is_dangerous(self):
        code = self.actest_fails("run", "--manifest", str(RUNS / "mediawiki_extension.json"), "--workers", "2")
        self.assertEqual(code, 2)

        run = ImpactRun.objects.get()
        self.assertEqual((run.impact_count, run.exit_code), (8, 2))
        self.assertGreaterEqual(run.dangerous_count, 1)
        labels = [t["entry"]["key"] for t in run.report["triage"] if t["severity"] == "DANGEROUS"]
        self.assertIn({"kind": "Directory", "value": "/extensions/MW-OAuth2Client"}, labels)

    def test_database_dumps_with_advanced_trimming(self):
        out_path = self.tmp / "report.json"
        code = self.actest_fails("run", "--manifest", str(RUNS / "drupal_dumps.json"), "--out", str(out_path))
        self.assertEqual(code, 2)

        report = json.loads(out_path.read_text())
        self.assertEqual(report["meta"]["trim"], "advanced")
        self.assertEqual({i["object"] for i in report["impacts"]}, {"/db/light.sql.gz"})
        dangerous = [t["entry"]["key"]["value"] for t in report["triage"] if t["severity"] == "DANGEROUS"]
        self.assertIn(".sql.gz", dangerous)
        self.assertTrue(out_path.with_suffix(".txt").exists())

    def test_identity_change(self):
        text = self.actest("run", "--manifest", str(RUNS / "identity.json"))
        self.assertIn("No decisions changed.", text)
        self.assertEqual(ImpactRun.objects.get().exit_code, 0)

    def test_json_format(self):
        text = self.actest("run", "--manifest", str(RUNS / "identity.json"), "--format", "json")
        self.assertEqual(json.loads(text)["summary"]["impacts"], 0)

    @override_settings(ACTEST_RECORD_RUNS=False)
    def test_runs_can_go_unrecorded(self):
        self.actest("run", "--manifest", str(RUNS / "identity.json"))
        self.assertFalse(ImpactRun.objects.exists())

    def test_missing_manifest(self):
        self.assertEqual(self.actest_fails("run", "--manifest", str(self.tmp / "nope.json")), 1)

    def test_manifest_with_missing_program(self):
        manifest = self.tmp / "run.json"
        manifest.write_text(json.dumps({
            "program": "missing.ir",
            "config_old": str(SAMPLES / "configs" / "allow_all.conf"),
            "config_new": str(SAMPLES / "configs" / "allow_all.conf"),
            "data": str(SAMPLES / "data" / "mediawiki.json"),
            "requests": {"logs": str(SAMPLES / "requests" / "access.log")},
        }))
        self.assertEqual(self.actest_fails("run", "--manifest", str(manifest)), 1)
        self.assertFalse(ImpactRun.objects.exists())


class TrimCommandTests(CommandTestCase):

    def test_advanced(self):
        out_path = self.tmp / "trimmed.ir"
        text = self.actest(
            "trim", "--program", str(SAMPLES / "programs" / "static_file.ir"),
            "--tuples", str(SAMPLES / "tuples" / "static_file.json"),
            "--data", str(SAMPLES / "data" / "mediawiki.json"),
            "--out", str(out_path),
        )
        self.assertIn("1 probes: file_read", text)
        terminator = load_ir(out_path).function("static_handler").block("start").terminator
        self.assertIsInstance(terminator, Probe)
        report = json.loads(Path(f"{out_path}.accs.json").read_text())
        self.assertEqual([acc["check_id"] for acc in report["final_accs"]], ["file_read"])

    def test_advanced_needs_tuples_and_data(self):
        code = self.actest_fails(
            "trim", "--program", str(SAMPLES / "programs" / "static_file.ir"), "--out", str(self.tmp / "t.ir")
        )
        self.assertEqual(code, 1)

    def test_strawman(self):
        out_path = self.tmp / "strawman.ir"
        self.actest(
            "trim", "--mode", "strawman", "--program", str(SAMPLES / "programs" / "static_file.ir"),
            "--out", str(out_path),
        )
        self.assertNotIn("call static_handler", out_path.read_text())

    def test_strawman_without_sub_handlers_is_byte_identical(self):
        source = self.tmp / "plain.ir"
        source.write_text(dump_ir(parse_ir(
            "program entry main\nfn main role entry returns int\n"
            "  block start\n    log allow\n    return 200\nend\n"
        )))
        out_path = self.tmp / "plain.trimmed.ir"
        self.actest("trim", "--mode", "strawman", "--program", str(source), "--out", str(out_path))
        self.assertEqual(out_path.read_bytes(), source.read_bytes())

    def test_broken_program(self):
        source = self.tmp / "broken.ir"
        source.write_text("program entry main\n")
        code = self.actest_fails("trim", "--mode", "strawman", "--program", str(source), "--out", str(self.tmp / "x"))
        self.assertEqual(code, 1)


class TraceCommandTests(CommandTestCase):

    def trace(self, config, name):
        out_path = self.tmp / name
        text = self.actest(
            "trace", "--program", str(SAMPLES / "programs" / "static_file.ir"),
            "--config", str(SAMPLES / "configs" / config),
            "--data", str(SAMPLES / "data" / "mediawiki.json"),
            "--request", REQUEST,
            "--out", str(out_path),
        )
        return text, out_path

    def test_trace_and_diff(self):
        text, allow = self.trace("allow_all.conf", "allow.json")
        self.assertIn("GET /index.php: ALLOW (code 200", text)
        _, deny = self.trace("deny_all.conf", "deny.json")

        result = json.loads(self.actest(
            "cfg-diff", "--allow", str(allow), "--deny", str(deny),
            "--program", str(SAMPLES / "programs" / "static_file.ir"),
        ))
        self.assertEqual(result["final_acc"]["check_id"], "access_rules")
        self.assertEqual(result["coloring"]["red"], 1)

        plain = json.loads(self.actest("cfg-diff", "--allow", str(allow), "--deny", str(deny)))
        self.assertIsNone(plain["final_acc"])
        self.assertIn("--program", plain["final_acc_note"])
        self.assertNotIn("final_acc_note", result)
        self.assertEqual(plain["coloring"], result["coloring"])

    def test_identical_traces_have_no_divergence(self):
        _, allow = self.trace("allow_all.conf", "allow.json")
        self.assertEqual(self.actest_fails("cfg-diff", "--allow", str(allow), "--deny", str(allow)), 3)

    def test_bad_request(self):
        code = self.actest_fails(
            "trace", "--program", str(SAMPLES / "programs" / "static_file.ir"),
            "--config", str(SAMPLES / "configs" / "allow_all.conf"),
            "--data", str(SAMPLES / "data" / "mediawiki.json"),
            "--request", '{"object": "/index.php"}',
            "--out", str(self.tmp / "t.json"),
        )
        self.assertEqual(code, 1)


class CorpusCommandTests(CommandTestCase):

    def test_replay(self):
        out_path = self.tmp / "corpus.json"
        text = self.actest("replay", "--log", str(SAMPLES / "requests" / "access.log"), "--out", str(out_path))
        self.assertIn("Replayed 4 requests", text)
        self.assertIn("(1 rejected)", text)
        rejected = json.loads(Path(f"{out_path}.rejected.json").read_text())
        self.assertEqual(rejected["rejected"][0]["line"], 5)

    def test_replay_with_users_table(self):
        out_path = self.tmp / "corpus.json"
        self.actest(
            "replay", "--log", str(SAMPLES / "requests" / "access.log"),
            "--data", str(SAMPLES / "data" / "mediawiki.json"),
            "--out", str(out_path),
        )
        subjects = [r["subject"] for r in json.loads(out_path.read_text())["requests"]]
        self.assertEqual(subjects[0], {"name": "alice", "groups": ["editors"]})
        self.assertEqual(subjects[1], {"name": "bob", "groups": ["admins", "editors"]})
        self.assertEqual(subjects[2]["groups"], [])

    def test_synthesize(self):
        out_path = self.tmp / "corpus.json"
        text = self.actest(
            "synthesize", "--spec", str(SAMPLES / "requests" / "synthesize_all.json"),
            "--data", str(SAMPLES / "data" / "mediawiki.json"),
            "--out", str(out_path),
        )
        # 7 files for 3 users and the anonymous subject
        self.assertIn("Synthesized 28 requests", text)

    def test_synthesize_with_a_change(self):
        text = self.actest(
            "synthesize", "--spec", str(SAMPLES / "requests" / "synthesize_all.json"),
            "--data", str(SAMPLES / "data" / "mediawiki.json"),
            "--change-old", str(SAMPLES / "configs" / "mediawiki.conf"),
            "--change-new", str(SAMPLES / "configs" / "mediawiki.conf"),
            "--data-delta", str(SAMPLES / "data" / "mediawiki_extension.delta.json"),
            "--out", str(self.tmp / "corpus.json"),
        )
        self.assertIn("Synthesized 36 requests", text)

    def test_change_needs_both_configs(self):
        code = self.actest_fails(
            "synthesize", "--spec", str(SAMPLES / "requests" / "synthesize_all.json"),
            "--data", str(SAMPLES / "data" / "mediawiki.json"),
            "--change-old", str(SAMPLES / "configs" / "mediawiki.conf"),
            "--out", str(self.tmp / "corpus.json"),
        )
        self.assertEqual(code, 1)


class TriageCommandTests(CommandTestCase):

    def setUp(self):
        super().setUp()
        self.report = self.tmp / "report.json"
        self.actest_fails("run", "--manifest", str(RUNS / "mediawiki_extension.json"), "--out", str(self.report))

    def test_default_rules(self):
        self.assertEqual(self.actest_fails("triage", "--report", str(self.report)), 2)

    def test_lenient_rules(self):
        rules = self.tmp / "rules.json"
        rules.write_text(json.dumps({"dot_prefix": False}))
        text = self.actest("triage", "--report", str(self.report), "--rules", str(rules))
        self.assertIn("LESS_DANGEROUS", text)
        self.assertIn("Directory(/extensions/MW-OAuth2Client)", text)

    def test_malformed_report(self):
        self.report.write_text('{"impacts": []}')
        self.assertEqual(self.actest_fails("triage", "--report", str(self.report)), 1)
