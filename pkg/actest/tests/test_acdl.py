from django.test import SimpleTestCase

from actest.acdl import (
    AcConfig, MatchKind, SelectorKind, changed_blocks, cidr_representatives, config_digest, dump_config,
    match_directives, parse_config, referenced_paths,
)
from actest.domain import Decision
from actest.errors import ConfigSyntaxError, PatternError

from .fixtures import request, sample_config


class ParseConfigTests(SimpleTestCase):

    def test_root_directives_become_one_root_block(self):
        cfg = parse_config("allow from all\ndeny from 10.0.0.0/8\n")
        self.assertEqual(len(cfg.blocks), 1)
        self.assertIs(cfg.blocks[0].selector.kind, SelectorKind.ROOT)
        self.assertEqual([d.kind for d in cfg.blocks[0].directives], [MatchKind.FROM_ALL, MatchKind.FROM_IP])

    def test_blocks_keep_their_order(self):
        cfg = sample_config("drupal_new")
        kinds = [block.selector.kind for block in cfg.blocks]
        self.assertEqual(kinds, [SelectorKind.FILES, SelectorKind.LOCATION, SelectorKind.FILES])
        self.assertTrue(cfg.blocks[0].selector.regex)
        self.assertFalse(cfg.blocks[2].selector.regex)

    def test_default_policy(self):
        self.assertIs(parse_config("").default_policy, Decision.ALLOW)
        self.assertIs(parse_config("default deny\n").default_policy, Decision.DENY)

    def test_semicolons_separate_directives(self):
        cfg = parse_config("location /a { deny from all; allow user alice; }")
        self.assertEqual(len(cfg.blocks[0].directives), 2)

    def test_syntax_error_reports_line_and_column(self):
        with self.assertRaises(ConfigSyntaxError) as ctx:
            parse_config("location /a {\n    allow sometimes all\n}\n")
        self.assertEqual(ctx.exception.line, 2)
        self.assertEqual(ctx.exception.col, 11)

    def test_unterminated_block(self):
        with self.assertRaises(ConfigSyntaxError):
            parse_config("location /a {\n    deny from all\n")

    def test_cidr_mask_out_of_range(self):
        with self.assertRaises(ConfigSyntaxError):
            parse_config("allow from 10.0.0.0/33\n")

    def test_unknown_method(self):
        with self.assertRaises(ConfigSyntaxError):
            parse_config("deny method FETCH\n")

    def test_bad_regex_pattern(self):
        with self.assertRaises(PatternError) as ctx:
            parse_config('files "^/(unclosed" {\n    deny from all\n}\n')
        self.assertEqual(ctx.exception.line, 1)

    def test_dump_parses_back_to_the_same_config(self):
        cfg = sample_config("mediawiki")
        again = parse_config(dump_config(cfg))
        self.assertEqual(config_digest(again), config_digest(cfg))
        self.assertEqual(changed_blocks(cfg, again), [])


class MatchDirectivesTests(SimpleTestCase):

    def test_empty_config_uses_default_policy(self):
        self.assertIs(match_directives(AcConfig(), request()), Decision.ALLOW)
        self.assertIs(match_directives(parse_config("default deny\n"), request()), Decision.DENY)

    def test_last_matching_directive_wins(self):
        cfg = parse_config("location /docs {\n    deny from all\n    allow user alice\n}\n")
        self.assertIs(match_directives(cfg, request("alice")), Decision.ALLOW)
        self.assertIs(match_directives(cfg, request("bob")), Decision.DENY)

    def test_most_specific_block_wins(self):
        cfg = parse_config(
            "location / {\n    deny from all\n}\n"
            "location /docs {\n    allow from all\n}\n"
        )
        self.assertIs(match_directives(cfg, request(obj="/docs/a.html")), Decision.ALLOW)
        self.assertIs(match_directives(cfg, request(obj="/blog/a.html")), Decision.DENY)

    def test_files_block_beats_location(self):
        cfg = parse_config(
            "location /docs {\n    allow from all\n}\n"
            'files "*.bak" {\n    deny from all\n}\n'
        )
        self.assertIs(match_directives(cfg, request(obj="/docs/site.bak")), Decision.DENY)

    def test_later_block_of_equal_rank_wins(self):
        cfg = parse_config(
            'files "*.sql" {\n    deny from all\n}\n'
            'files "^/public/" {\n    allow from all\n}\n'
        )
        self.assertIs(match_directives(cfg, request(obj="/public/dump.sql")), Decision.ALLOW)

    def test_location_prefix_respects_segments(self):
        cfg = parse_config("location /doc {\n    deny from all\n}\n")
        self.assertIs(match_directives(cfg, request(obj="/doc/a")), Decision.DENY)
        self.assertIs(match_directives(cfg, request(obj="/docs/a")), Decision.ALLOW)

    def test_glob_without_slash_matches_base_name(self):
        cfg = parse_config('files "*sql" {\n    deny from all\n}\n')
        self.assertIs(match_directives(cfg, request(obj="/vov_500.sql")), Decision.DENY)
        self.assertIs(match_directives(cfg, request(obj="/db/light.sql.gz")), Decision.ALLOW)

    def test_group_ip_and_method_directives(self):
        cfg = parse_config(
            "default deny\n"
            "location /admin {\n    allow group admins\n}\n"
            "location /lan {\n    allow from 192.168.0.0/16\n}\n"
            "location /ro {\n    allow from all\n    deny method PUT\n}\n"
        )
        self.assertIs(match_directives(cfg, request("bob", "/admin/x", groups=("admins",))), Decision.ALLOW)
        self.assertIs(match_directives(cfg, request("alice", "/admin/x")), Decision.DENY)
        self.assertIs(match_directives(cfg, request(obj="/lan/x", ip="192.168.3.4")), Decision.ALLOW)
        self.assertIs(match_directives(cfg, request(obj="/lan/x", ip="10.0.0.5")), Decision.DENY)
        self.assertIs(match_directives(cfg, request(obj="/ro/x", action="PUT")), Decision.DENY)
        self.assertIs(match_directives(cfg, request(obj="/ro/x", action="GET")), Decision.ALLOW)

    def test_block_without_matching_directive_falls_back_to_default(self):
        cfg = parse_config("default deny\nlocation /docs {\n    allow user alice\n}\n")
        self.assertIs(match_directives(cfg, request("carol", "/docs/a")), Decision.DENY)


class ConfigHelpersTests(SimpleTestCase):

    def test_referenced_paths(self):
        cfg = parse_config(
            "location /private {\n    deny from all\n}\n"
            'files "robots.txt" {\n    allow from all\n}\n'
            'files "*.sql" {\n    deny from all\n}\n'
        )
        self.assertEqual(referenced_paths(cfg), ["/private", "/robots.txt"])

    def test_cidr_representatives_cover_inside_and_outside(self):
        ips = cidr_representatives(sample_config("proxy"))
        self.assertEqual(ips[:2], ["10.0.0.1", "192.168.0.1"])
        self.assertEqual(len(ips), 3)
        self.assertFalse(ips[2].startswith("10.") or ips[2].startswith("192.168."))

    def test_changed_blocks(self):
        changed = changed_blocks(sample_config("drupal_old"), sample_config("drupal_new"))
        self.assertEqual(len(changed), 1)
        self.assertEqual(changed[0].selector.value, "*sql")
        self.assertEqual(changed_blocks(sample_config("drupal_old"), sample_config("drupal_old")), [])
