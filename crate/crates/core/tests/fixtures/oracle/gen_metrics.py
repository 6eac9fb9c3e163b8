"""Freezes reference metrics for the snippets below.

Token counts come from the tokenize module, tree depth from the Python
tree-sitter binding, variables, calls and imports from the ast module and
BLEU from the plain implementation at the bottom. Rerun after editing the
snippets:  python3 gen_metrics.py > metrics.json
"""

import ast
import io
import json
import math
import sys
import tokenize
from collections import Counter

import tree_sitter_python
from tree_sitter import Language, Parser

SNIPPETS = {
    "add": "def add(a, b):\n    return a + b\n",
    "loop": "def total(xs):\n    s = 0\n    for i, x in enumerate(xs):\n        s += x * i\n    return s\n",
    "comprehension": "def squares(n):\n    return [k * k for k in range(n) if k % 2]\n",
    "imports": "import os\nimport numpy as np\nfrom collections import OrderedDict\nfrom .local import thing\nimport xml.etree.ElementTree as ET\n\ndef f(x):\n    return np.array(os.sep) if x else OrderedDict()\n",
    "method": "class Box:\n    def __init__(self, w, h):\n        self.w = w\n        self.h = h\n\n    def area(self):\n        return self.w * self.h\n",
    "walrus": "def first_long(words):\n    while (w := words.pop()) and len(w) < 5:\n        pass\n    return w\n",
    "with": "import contextlib\n\ndef use(lock):\n    with contextlib.suppress(KeyError) as guard, lock:\n        value = guard\n    return value\n",
    "strings": "def greet(name):\n    # say hello\n    msg = f\"hi {name}\" + 'x' + \"\"\"multi\nline\"\"\"\n    return msg.upper()\n",
    "nested": "def outer(a):\n    def inner(b, *args, c=1, **kw):\n        return [(b, c) for (b, c) in kw.items()]\n    return inner(a)(a)\n",
    "lambda": "def sort_pairs(ps):\n    key = lambda p, q=0: (p[1], q)\n    ps.sort(key=key)\n    return sorted(ps, key=lambda t: t[0])\n",
    "numbers": "def consts():\n    x, y = 0x1F, 1_000.5e-3\n    z = 3j + .5\n    x **= 2\n    return x // y, z\n",
    "decorated_async": "import asyncio\n\nasync def fetch_all(urls, limit=3):\n    sem = asyncio.Semaphore(limit)\n    async with sem:\n        results = [await asyncio.sleep(0) for _ in urls]\n    return results\n",
}

# Span whose variables and calls are counted: this function's definition.
TARGETS = {
    "method": "area",
    "nested": "inner",
    "imports": "f",
}

BLEU_PAIRS = [
    ("def add(a, b):\n    return a + b\n", "def add(a, b):\n    return a + b\n"),
    ("def add(x, y):\n    return x + y\n", "def add(a, b):\n    return a + b\n"),
    ("return a + b\n", "def add(a, b):\n    return a + b\n"),
    ("x = 1\n", "def add(a, b):\n    return a + b\n"),
    ("for i in range(10):\n    total += i * i\nprint(total)\n", "for j in range(10):\n    total += j\nprint(total, j)\n"),
]

SIGNIFICANT = {tokenize.NAME, tokenize.NUMBER, tokenize.STRING, tokenize.OP}


def tokens(src):
    out = []
    for tok in tokenize.generate_tokens(io.StringIO(src).readline):
        if tok.type == tokenize.ERRORTOKEN:
            raise ValueError(f"error token {tok.string!r}")
        if tok.type in SIGNIFICANT:
            out.append(tok.string)
    return out


PARSER = Parser(Language(tree_sitter_python.language()))


def depth(node):
    return 1 + max((depth(c) for c in node.children), default=0)


def line_offsets(src):
    offs, pos = [], 0
    for line in src.splitlines(keepends=True):
        offs.append(pos)
        pos += len(line.encode())
    return offs


def span_of(src, tree, name):
    offs = line_offsets(src)
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.name == name:
            start = offs[node.lineno - 1] + node.col_offset
            end = offs[node.end_lineno - 1] + node.end_col_offset
            return node, [start, end]
    raise KeyError(name)


def bound(node):
    names = set()
    for n in ast.walk(node):
        if isinstance(n, ast.Name) and isinstance(n.ctx, ast.Store):
            names.add(n.id)
        elif isinstance(n, ast.arg):
            names.add(n.arg)
    return names


def imports(tree):
    mods = set()
    for n in ast.walk(tree):
        if isinstance(n, ast.Import):
            mods.update(a.name.split(".")[0] for a in n.names)
        elif isinstance(n, ast.ImportFrom) and n.level == 0 and n.module:
            mods.add(n.module.split(".")[0])
    return mods


def metrics(src, target):
    tree = ast.parse(src)
    span = None
    scope = tree
    if target:
        scope, span = span_of(src, tree, target)
    mods = imports(tree)
    return {
        "code": src,
        "target_span": span,
        "code_tokens": len(tokens(src)),
        "ast_depth": depth(PARSER.parse(src.encode()).root_node),
        "variables": sorted(bound(scope)),
        "stdlib_imports": sorted(m for m in mods if m in sys.stdlib_module_names),
        "external_imports": sorted(m for m in mods if m not in sys.stdlib_module_names),
        "function_calls_in_target": sum(isinstance(n, ast.Call) for n in ast.walk(scope)),
    }


def bleu(cand, ref, max_order=4):
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_order + 1):
        total = len(cand) - n + 1
        if total <= 0:
            continue
        c = Counter(tuple(cand[i:i + n]) for i in range(total))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        matches = sum(min(v, r[g]) for g, v in c.items())
        if matches == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = matches / total
        log_sum += math.log(p) / max_order
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(log_sum)


out = {
    "snippets": {name: metrics(src, TARGETS.get(name)) for name, src in SNIPPETS.items()},
    "bleu": [{"candidate": c, "reference": r, "bleu": bleu(tokens(c), tokens(r))} for c, r in BLEU_PAIRS],
}
json.dump(out, sys.stdout, indent=1, sort_keys=True)
print()
