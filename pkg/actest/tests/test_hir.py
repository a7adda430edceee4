from django.test import SimpleTestCase

from actest.domain import Decision
from actest.errors import IrSyntaxError, IrValidationError
from actest.hir import (
    Branch, Call, CondCheck, Io, Log, Probe, Return, Role, dump_ir, parse_ir,
)

from .fixtures import sample_program

MINIMAL = """
program entry main

fn main role entry returns int
  block start
    log allow
    return 200
end
"""


class ParseIrTests(SimpleTestCase):

    def test_sample_program_structure(self):
        prog = sample_program("static_file")
        self.assertEqual(prog.entry, "handle_request")
        self.assertEqual(prog.roles, {"handle_request": Role.ENTRY, "static_handler": Role.SUB})

        start = prog.function("handle_request").entry_block
        self.assertEqual(start.statements, (Io(5),))
        check = start.terminator
        self.assertIsInstance(check, CondCheck)
        self.assertEqual(check.check_id, "access_rules")
        self.assertEqual(check.fn_name_tag, "ap_check_access")
        self.assertEqual((check.allow_label, check.deny_label), ("dispatch", "forbidden"))

        dispatch = prog.function("handle_request").block("dispatch")
        self.assertEqual(dispatch.statements, (Call("static_handler"),))
        self.assertEqual(dispatch.terminator, Return(None))

        send = prog.function("static_handler").block("send")
        self.assertEqual(send.statements, (Io(1000, "read", "$object"), Log(Decision.ALLOW)))

    def test_checks_iterates_every_check(self):
        prog = sample_program("app")
        ids = sorted(block.terminator.check_id for _, block in prog.checks())
        self.assertEqual(ids, ["get_access", "get_perm", "put_access", "put_perm"])

    def test_fn_tag_defaults_to_predicate_name(self):
        prog = parse_ir(MINIMAL.replace("    log allow\n    return 200\n", (
            "    check c1 method_is(GET) allow ok deny ok\n"
            "  block ok\n"
            "    log allow\n"
            "    return 200\n"
        )))
        self.assertEqual(prog.function("main").entry_block.terminator.fn_name_tag, "method_is")

    def test_branch_and_probe(self):
        text = """
program entry main
fn main role entry returns int
  block start
    branch nondet(x) then a else b
  block a
    probe p1 file_perm(READ) as check_perm jump b
  block b
    log deny
    return 403
end
"""
        fn = parse_ir(text).function("main")
        self.assertEqual(fn.block("start").terminator.cond.render(), "nondet(x)")
        self.assertIsInstance(fn.block("start").terminator, Branch)
        probe = fn.block("a").terminator
        self.assertIsInstance(probe, Probe)
        self.assertEqual((probe.check_id, probe.fn_name_tag, probe.jump), ("p1", "check_perm", "b"))

    def test_dump_is_canonical(self):
        for name in ("static_file", "proxy", "app", "routed", "request_pipeline"):
            with self.subTest(program=name):
                prog = sample_program(name)
                self.assertEqual(parse_ir(dump_ir(prog)), prog)


class IrErrorTests(SimpleTestCase):

    def test_empty_program(self):
        with self.assertRaises(IrSyntaxError):
            parse_ir("# nothing here\n")

    def test_missing_terminator_reports_line(self):
        with self.assertRaises(IrSyntaxError) as ctx:
            parse_ir("program entry main\nfn main role entry returns int\n  block start\n    log allow\nend\n")
        self.assertEqual(ctx.exception.line, 5)

    def test_statement_after_terminator(self):
        with self.assertRaises(IrSyntaxError):
            parse_ir(MINIMAL.replace("    return 200\n", "    return 200\n    io 3\n"))

    def test_unknown_predicate(self):
        with self.assertRaises(IrSyntaxError):
            parse_ir(MINIMAL.replace("    return 200\n", "    check c1 magic allow start deny start\n"))

    def test_write_without_path(self):
        with self.assertRaises(IrSyntaxError):
            parse_ir(MINIMAL.replace("    log allow\n", "    io 3 write\n    log allow\n"))

    def test_dangling_call(self):
        with self.assertRaises(IrValidationError):
            parse_ir(MINIMAL.replace("    log allow\n", "    call nowhere\n    log allow\n"))

    def test_dangling_label(self):
        with self.assertRaises(IrValidationError):
            parse_ir(MINIMAL.replace("    return 200\n", "    goto nowhere\n"))

    def test_entry_must_exist_and_be_unique(self):
        with self.assertRaises(IrValidationError):
            parse_ir(MINIMAL.replace("program entry main", "program entry other"))
        with self.assertRaises(IrValidationError):
            parse_ir(MINIMAL + "\nfn second role entry returns int\n  block s\n    log deny\n    return 403\nend\n")

    def test_duplicate_check_ids(self):
        text = """
program entry main
fn main role entry returns int
  block start
    check c1 method_is(GET) allow next deny next
  block next
    check c1 method_is(PUT) allow done deny done
  block done
    log allow
    return 200
end
"""
        with self.assertRaises(IrValidationError):
            parse_ir(text)
