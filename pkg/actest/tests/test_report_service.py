import json

from django.test import SimpleTestCase

from actest.domain import Decision
from actest.errors import ImpactError, RuleParseError
from actest.impact_service import Direction, ImpactTuple
from actest.report_service import (
    AggregateEntry, KeyKind, RuleSet, Severity, aggregate, build_report, object_suffix, parent_directories,
    render_json, render_text, report_from_dict, triage,
)

from .fixtures import request


def revoked(obj, name="alice", action="GET", groups=()):
    return ImpactTuple.of(request(name, obj, action, groups=groups), Decision.ALLOW, Decision.DENY)


def granted(obj, name="alice", action="GET", groups=()):
    return ImpactTuple.of(request(name, obj, action, groups=groups), Decision.DENY, Decision.ALLOW)


def entry(kind, value, members, direction=Direction.DENY_TO_ALLOW):
    return AggregateEntry.of(kind, value, direction, members)


class PathHelperTests(SimpleTestCase):

    def test_object_suffix(self):
        self.assertEqual(object_suffix("/db/light.sql.gz"), ".sql.gz")
        self.assertEqual(object_suffix("/index.php"), ".php")
        self.assertEqual(object_suffix("/.htaccess"), "(none)")
        self.assertEqual(object_suffix("/README"), "(none)")

    def test_parent_directories(self):
        self.assertEqual(parent_directories("/a/b/c.txt"), ["/", "/a", "/a/b"])
        self.assertEqual(parent_directories("/top.txt"), ["/"])


class AggregateTests(SimpleTestCase):

    def setUp(self):
        self.docs = [f"/docs/page{i}.html" for i in range(30)]

    def test_fully_flipped_directory_collapses(self):
        impacts = [revoked(obj) for obj in self.docs]
        entries = aggregate(impacts, tested=self.docs)
        self.assertEqual(len(entries), 1)
        self.assertEqual(entries[0].label, "Directory(/docs)")
        self.assertEqual(entries[0].count, 30)
        self.assertEqual(entries[0].suffixes, (".html",))
        self.assertEqual(len(entries[0].sample), 5)

    def test_one_unflipped_object_blocks_the_directory(self):
        impacts = [revoked(obj) for obj in self.docs[:29]]
        entries = aggregate(impacts, tested=self.docs)
        self.assertFalse([e for e in entries if e.kind is KeyKind.DIRECTORY])
        suffix = [e for e in entries if e.kind is KeyKind.SUFFIX]
        self.assertEqual([(e.value, e.count) for e in suffix], [(".html", 29)])

    def test_mixed_directions_block_the_directory(self):
        impacts = [revoked(obj) for obj in self.docs[:15]] + [granted(obj) for obj in self.docs[15:]]
        entries = aggregate(impacts, tested=self.docs)
        self.assertFalse([e for e in entries if e.kind is KeyKind.DIRECTORY])

    def test_deepest_directory_with_the_same_objects_is_named(self):
        objects = ["/srv/www/site/a.html", "/srv/www/site/b.html"]
        entries = aggregate([granted(obj) for obj in objects])
        self.assertEqual([e.label for e in entries], ["Directory(/srv/www/site)"])

    def test_single_object_directories_do_not_collapse(self):
        entries = aggregate([granted("/db/light.sql.gz")], tested=["/db/light.sql.gz", "/db/README.txt"])
        self.assertEqual(
            [e.label for e in entries],
            ["Suffix(.sql.gz)", "Action(GET)"],
        )

    def test_groups_and_actions(self):
        impacts = [
            granted("/a.txt", groups=("editors",)),
            granted("/b.bin", "bob", "PUT", groups=("editors", "admins")),
        ]
        entries = aggregate(impacts, tested=["/a.txt", "/b.bin", "/c.txt"])
        labels = {e.label: e.count for e in entries}
        self.assertEqual(labels["SubjectGroup(editors)"], 2)
        self.assertEqual(labels["SubjectGroup(admins)"], 1)
        self.assertEqual(labels["Action(PUT)"], 1)
        self.assertEqual(labels["Suffix(.txt)"], 1)

    def test_deny_to_allow_comes_first(self):
        entries = aggregate([revoked("/a.txt"), granted("/b.txt")], tested=["/a.txt", "/b.txt", "/c.txt"])
        directions = [e.direction for e in entries]
        self.assertEqual(directions, sorted(directions, key=lambda d: d is Direction.ALLOW_TO_DENY))

    def test_entry_from_dict(self):
        original = entry(KeyKind.SUFFIX, ".sql", [granted("/dump.sql")])
        again = AggregateEntry.from_dict(json.loads(json.dumps(original.to_dict())))
        self.assertEqual(again, original)
        with self.assertRaises(ImpactError):
            AggregateEntry.from_dict({"key": {"kind": "Planet", "value": "x"}})


class TriageTests(SimpleTestCase):

    def setUp(self):
        self.rules = RuleSet.default()

    def severity(self, item):
        return triage([item], self.rules)[0]

    def test_default_rules(self):
        self.assertTrue(self.rules.dot_prefix)
        self.assertIn(".sql.gz", self.rules.suffixes)
        self.assertIn("phpunit", self.rules.substrings)
        self.assertEqual(self.rules.methods, ("TRACE",))

    def test_dot_prefixed_segment_anywhere(self):
        result = self.severity(entry(KeyKind.SUFFIX, "(none)", [granted("/repo/.git/config")]))
        self.assertIs(result.severity, Severity.DANGEROUS)
        self.assertEqual(result.reasons, ("dot-prefixed name /repo/.git/config",))

    def test_suffix_rule(self):
        result = self.severity(entry(KeyKind.SUFFIX, ".sql.gz", [granted("/db/light.sql.gz")]))
        self.assertIs(result.severity, Severity.DANGEROUS)
        self.assertIn("suffix .sql.gz in /db/light.sql.gz", result.reasons)

    def test_substring_rule_on_directories(self):
        members = [granted("/ext/vendor/phpunit/a.php"), granted("/ext/vendor/phpunit/b.php")]
        result = self.severity(entry(KeyKind.DIRECTORY, "/ext/vendor/phpunit", members))
        self.assertIs(result.severity, Severity.DANGEROUS)

    def test_dangerous_method(self):
        result = self.severity(entry(KeyKind.ACTION, "TRACE", [granted("/", action="TRACE")]))
        self.assertEqual(result.reasons, ("dangerous method TRACE",))

    def test_one_exposed_object_is_counted_once(self):
        impact = granted("/db/light.sql.gz", groups=("editors",))
        entries = aggregate([impact], tested=["/db/light.sql.gz", "/db/README.txt"])
        self.assertEqual(
            [e.label for e in entries],
            ["Suffix(.sql.gz)", "SubjectGroup(editors)", "Action(GET)"],
        )
        dangerous = [t.entry.label for t in triage(entries, self.rules) if t.severity is Severity.DANGEROUS]
        self.assertEqual(dangerous, ["Suffix(.sql.gz)"])

    def test_method_rules_skip_object_buckets(self):
        impact = granted("/", action="TRACE")
        self.assertEqual(self.severity(entry(KeyKind.ACTION, "TRACE", [impact])).severity, Severity.DANGEROUS)
        self.assertEqual(self.severity(entry(KeyKind.SUFFIX, "(none)", [impact])).reasons, ())

    def test_directory_carries_method_rules(self):
        members = [granted("/api/a", action="TRACE"), granted("/api/b", action="TRACE")]
        result = self.severity(entry(KeyKind.DIRECTORY, "/api", members))
        self.assertEqual(result.reasons, ("dangerous method TRACE",))

    def test_harmless_entry(self):
        result = self.severity(entry(KeyKind.SUFFIX, ".html", [granted("/docs/index.html")]))
        self.assertIs(result.severity, Severity.LESS_DANGEROUS)
        self.assertEqual(result.reasons, ())

    def test_rules_from_dict(self):
        rules = RuleSet.from_dict({"suffixes": [".key"], "methods": ["delete"], "dot_prefix": False})
        self.assertEqual(rules.methods, ("DELETE",))
        hidden = entry(KeyKind.SUFFIX, "(none)", [granted("/.env")])
        self.assertIs(triage([hidden], rules)[0].severity, Severity.LESS_DANGEROUS)
        for bad in ({"suffixes": ["key"]}, {"methods": ["FETCH"]}, {"substrings": "phpunit"}):
            with self.subTest(rules=bad), self.assertRaises(RuleParseError):
                RuleSet.from_dict(bad)

    def test_missing_rule_file(self):
        with self.assertRaises(RuleParseError):
            RuleSet.load("/nonexistent/rules.json")


class ReportTests(SimpleTestCase):

    def setUp(self):
        self.impacts = [
            revoked("/docs/a.html"),
            granted("/db/light.sql.gz"),
            granted("/db/light.sql.gz", "bob"),
        ]
        self.tested = ["/docs/a.html", "/docs/b.html", "/db/light.sql.gz", "/db/README.txt"]

    def test_build_report(self):
        report = build_report(self.impacts, RuleSet.default(), self.tested, {"trim": "none"})
        summary = report.to_dict()["summary"]
        self.assertEqual(summary["impacts"], 3)
        self.assertEqual((summary["deny_to_allow"], summary["allow_to_deny"]), (2, 1))
        self.assertEqual(report.impacts[0].direction, Direction.DENY_TO_ALLOW)
        self.assertEqual([t.entry.label for t in report.dangerous], ["Suffix(.sql.gz)"])

    def test_text_rendering(self):
        text = render_text(build_report(self.impacts, RuleSet.default(), self.tested))
        self.assertIn("impacts: 3 (DENY->ALLOW 2, ALLOW->DENY 1)", text)
        lines = text.splitlines()
        header = next(i for i, line in enumerate(lines) if line.startswith("SEVERITY"))
        self.assertTrue(lines[header + 1].startswith("DANGEROUS"))
        self.assertIn("DENY->ALLOW", lines[header + 1])

    def test_empty_report(self):
        report = build_report([], RuleSet.default())
        self.assertTrue(render_text(report).endswith("No decisions changed.\n"))
        self.assertEqual(report.dangerous, [])

    def test_stored_report_is_triaged_again(self):
        stored = json.loads(render_json(build_report(self.impacts, RuleSet.default(), self.tested)))
        lenient = report_from_dict(stored, RuleSet(suffixes=(".bak",)))
        self.assertEqual(lenient.dangerous, [])
        self.assertEqual(len(lenient.impacts), 3)
        strict = report_from_dict(stored, RuleSet(substrings=("docs",)))
        self.assertEqual({t.entry.label for t in strict.dangerous}, {"Suffix(.html)"})
        with self.assertRaises(ImpactError):
            report_from_dict({"impacts": []}, RuleSet.default())
