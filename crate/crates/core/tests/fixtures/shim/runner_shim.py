"""Reference runner shim used by the test suites.

Usage: runner_shim.py SOLUTION TESTS --timeout-soft SECONDS --coverage on|off

Runs the solution module, then the test statements one by one in the same
namespace, and prints a one-line JSON verdict as the last line of stdout.
"""
import ast
import json
import os
import signal
import sys
import traceback
import types

SHIM_FILE = os.path.abspath(__file__)


class SoftTimeout(BaseException):
    pass


def on_alarm(signum, frame):
    raise SoftTimeout()


def executable_lines(code, filename):
    lines = set()
    stack = [c for c in code.co_consts if isinstance(c, types.CodeType)]
    while stack:
        c = stack.pop()
        if c.co_filename != filename:
            continue
        for _, _, line in c.co_lines():
            if line is not None and line != c.co_firstlineno:
                lines.add(line)
        stack.extend(k for k in c.co_consts if isinstance(k, types.CodeType))
    return lines


def format_error(exc):
    tb = exc.__traceback__
    while tb is not None and os.path.abspath(tb.tb_frame.f_code.co_filename) == SHIM_FILE:
        tb = tb.tb_next
    sys.stderr.write("".join(traceback.format_exception(type(exc), exc, tb)))
    sys.stderr.flush()
    return "%s: %s" % (type(exc).__name__, exc)


def main(argv):
    args = argv[1:]
    solution_path, tests_path = args[0], args[1]
    opts = dict(zip(args[2::2], args[3::2]))
    soft = float(opts.get("--timeout-soft", "0"))
    coverage_on = opts.get("--coverage", "off") == "on"
    out = os.fdopen(os.dup(1), "w")

    verdict = {"status": "passed", "asserts": [], "coverage": None, "error": None}
    sol_name = os.path.basename(solution_path)
    tests_name = os.path.basename(tests_path)
    with open(solution_path, encoding="utf-8") as f:
        sol_src = f.read()
    with open(tests_path, encoding="utf-8") as f:
        tests_src = f.read()

    try:
        sol_code = compile(sol_src, sol_name, "exec")
        tests_tree = ast.parse(tests_src, tests_name)
    except SyntaxError as e:
        verdict.update(status="compile_error", error=format_error(e))
        emit(out, verdict)
        return

    hit = set()

    def tracer(frame, event, arg):
        if frame.f_code.co_filename != sol_name:
            return None
        if event == "line":
            hit.add(frame.f_lineno)
        return tracer

    module = types.ModuleType("solution_under_test")
    sys.modules["solution_under_test"] = module
    ns = module.__dict__
    if soft > 0:
        signal.signal(signal.SIGALRM, on_alarm)
        signal.setitimer(signal.ITIMER_REAL, soft)
    if coverage_on:
        sys.settrace(tracer)
    try:
        exec(sol_code, ns)
        for stmt in tests_tree.body:
            code = compile(ast.Module(body=[stmt], type_ignores=[]), tests_name, "exec")
            try:
                exec(code, ns)
            except AssertionError as e:
                verdict["asserts"].append(0)
                verdict.update(status="failed_assert", error=format_error(e))
                break
            if isinstance(stmt, ast.Assert):
                verdict["asserts"].append(1)
    except SoftTimeout:
        verdict.update(status="timeout", error="soft timeout after %ss" % soft)
    except BaseException as e:  # noqa: BLE001 - every failure becomes a verdict
        verdict.update(status="runtime_error", error=format_error(e))
    finally:
        sys.settrace(None)
        if soft > 0:
            signal.setitimer(signal.ITIMER_REAL, 0)
    if coverage_on:
        lines = executable_lines(sol_code, sol_name)
        if lines:
            verdict["coverage"] = len(lines & hit) / len(lines)
    emit(out, verdict)


def emit(out, verdict):
    sys.stdout.flush()
    out.write("\n" + json.dumps(verdict) + "\n")
    out.flush()


if __name__ == "__main__":
    main(sys.argv)
