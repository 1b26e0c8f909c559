# ---------------------------------------------------
# minilang.py - Alpha and Beta Mini-Languages
# ---------------------------------------------------
# Two toy imperative languages with the same meaning
# (assignment, arithmetic, counted loops, print) and
# different surface syntax. Alpha is infix and brace
# delimited, Beta uses prefix operator words and
# begin/end blocks. Programs are generated as a small
# tree, rendered in either language, parsed back and
# run by one interpreter, which is the oracle that
# translation pairs preserve meaning.
#
#   alpha:  let a = n + 3 ; loop 2 { print a ; }
#   beta:   a <- plus n 3 . loop 2 times begin show a . end
# ---------------------------------------------------

from dataclasses import dataclass, replace

from modules.errors import ConfigError, DataError

LANGUAGES = ("alpha", "beta")
VARIABLES = ("a", "b", "c", "d")
INPUT_VARIABLE = "n"
OPERATORS = ("+", "-", "*")
OPERATOR_WORDS = {"+": "plus", "-": "minus", "*": "times"}
WORD_OPERATORS = {word: op for op, word in OPERATOR_WORDS.items()}


class UseBeforeAssign(DataError):
    """ A program read a variable before any assignment to it. """


class ParseError(DataError):
    pass


# -------------------
#  PROGRAM TREE
# -------------------
@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Assign:
    target: str
    expr: object


@dataclass(frozen=True)
class Print:
    expr: object


@dataclass(frozen=True)
class Loop:
    count: int
    body: tuple


# -------------------
#  RENDERING
# -------------------
def _atom_text(atom):
    return str(atom.value) if isinstance(atom, Num) else atom.name


def _alpha_expr(expr):
    if isinstance(expr, BinOp):
        return f"{_atom_text(expr.left)} {expr.op} {_atom_text(expr.right)}"
    return _atom_text(expr)


def _beta_expr(expr):
    if isinstance(expr, BinOp):
        return (f"{OPERATOR_WORDS[expr.op]} {_atom_text(expr.left)} "
                f"{_atom_text(expr.right)}")
    return _atom_text(expr)


def _render_alpha(statement):
    if isinstance(statement, Assign):
        return f"let {statement.target} = {_alpha_expr(statement.expr)} ;"
    if isinstance(statement, Print):
        return f"print {_alpha_expr(statement.expr)} ;"
    body = " ".join(_render_alpha(inner) for inner in statement.body)
    return f"loop {statement.count} {{ {body} }}"


def _render_beta(statement):
    if isinstance(statement, Assign):
        return f"{statement.target} <- {_beta_expr(statement.expr)} ."
    if isinstance(statement, Print):
        return f"show {_beta_expr(statement.expr)} ."
    body = " ".join(_render_beta(inner) for inner in statement.body)
    return f"loop {statement.count} times begin {body} end"


def render(program, language):
    """ Program tree -> whitespace-tokenized source text. """
    renderers = {"alpha": _render_alpha, "beta": _render_beta}
    if language not in renderers:
        raise ConfigError(f"unknown mini-language {language!r}")
    return " ".join(renderers[language](statement) for statement in program)


def describe(program):
    """ Templated natural-language summary, identical for both languages. """
    def expr_words(expr):
        if isinstance(expr, BinOp):
            return (f"{_atom_text(expr.left)} {OPERATOR_WORDS[expr.op]} "
                    f"{_atom_text(expr.right)}")
        return _atom_text(expr)

    def sentence(statement):
        if isinstance(statement, Assign):
            return f"set {statement.target} to {expr_words(statement.expr)}"
        if isinstance(statement, Print):
            return f"output {expr_words(statement.expr)}"
        inner = " then ".join(sentence(s) for s in statement.body)
        return f"repeat {statement.count} times {inner} done"

    return " then ".join(sentence(statement) for statement in program)


# -------------------
#  PARSING
# -------------------
class _Tokens:

    def __init__(self, text):
        self.items = text.split()
        self.pos = 0

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else None

    def next(self):
        token = self.peek()
        if token is None:
            raise ParseError("unexpected end of program")
        self.pos += 1
        return token

    def expect(self, token):
        found = self.next()
        if found != token:
            raise ParseError(f"expected {token!r}, found {found!r}")

    def done(self):
        return self.pos >= len(self.items)


def _parse_atom(tokens):
    token = tokens.next()
    if token.isdigit():
        return Num(int(token))
    if token in VARIABLES or token == INPUT_VARIABLE:
        return Var(token)
    raise ParseError(f"expected a number or variable, found {token!r}")


def _parse_alpha_expr(tokens):
    left = _parse_atom(tokens)
    if tokens.peek() in OPERATORS:
        op = tokens.next()
        return BinOp(op, left, _parse_atom(tokens))
    return left


def _parse_beta_expr(tokens):
    if tokens.peek() in WORD_OPERATORS:
        op = WORD_OPERATORS[tokens.next()]
        left = _parse_atom(tokens)
        return BinOp(op, left, _parse_atom(tokens))
    return _parse_atom(tokens)


def _parse_alpha_statement(tokens):
    keyword = tokens.next()
    if keyword == "let":
        target = tokens.next()
        tokens.expect("=")
        statement = Assign(target, _parse_alpha_expr(tokens))
        tokens.expect(";")
        return statement
    if keyword == "print":
        statement = Print(_parse_alpha_expr(tokens))
        tokens.expect(";")
        return statement
    if keyword == "loop":
        count = int(tokens.next())
        tokens.expect("{")
        body = []
        while tokens.peek() != "}":
            body.append(_parse_alpha_statement(tokens))
        tokens.expect("}")
        return Loop(count, tuple(body))
    raise ParseError(f"unknown alpha statement {keyword!r}")


def _parse_beta_statement(tokens):
    keyword = tokens.next()
    if keyword == "show":
        statement = Print(_parse_beta_expr(tokens))
        tokens.expect(".")
        return statement
    if keyword == "loop":
        count = int(tokens.next())
        tokens.expect("times")
        tokens.expect("begin")
        body = []
        while tokens.peek() != "end":
            body.append(_parse_beta_statement(tokens))
        tokens.expect("end")
        return Loop(count, tuple(body))
    tokens.expect("<-")
    statement = Assign(keyword, _parse_beta_expr(tokens))
    tokens.expect(".")
    return statement


def parse(text, language):
    """ Source text -> program tree; raises ParseError on bad syntax. """
    parsers = {"alpha": _parse_alpha_statement, "beta": _parse_beta_statement}
    if language not in parsers:
        raise ConfigError(f"unknown mini-language {language!r}")
    tokens = _Tokens(text)
    program = []
    while not tokens.done():
        program.append(parsers[language](tokens))
    return tuple(program)


# -------------------
#  INTERPRETER
# -------------------
def run(program, value):
    """ Runs the program with the input variable bound to value; returns prints. """
    env = {INPUT_VARIABLE: value}
    printed = []

    def evaluate(expr):
        if isinstance(expr, Num):
            return expr.value
        if isinstance(expr, Var):
            if expr.name not in env:
                raise UseBeforeAssign(f"variable {expr.name!r} read before assignment")
            return env[expr.name]
        left, right = evaluate(expr.left), evaluate(expr.right)
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        return left * right

    def execute(statements):
        for statement in statements:
            if isinstance(statement, Assign):
                env[statement.target] = evaluate(statement.expr)
            elif isinstance(statement, Print):
                printed.append(evaluate(statement.expr))
            else:
                for _ in range(statement.count):
                    execute(statement.body)

    execute(program)
    return printed


def has_use_before_assign(program):
    try:
        run(program, 0)
    except UseBeforeAssign:
        return True
    return False


# -------------------
#  GENERATION
# -------------------
class ProgramGenerator:

    def __init__(self, rng):
        """
        Draws random programs from a numpy Generator. Clean programs
        only read the input variable or variables assigned earlier;
        buggy programs get one planted use-before-assign read.
        """
        self.rng = rng

    def _pick(self, options):
        return options[int(self.rng.integers(len(options)))]

    def _atom(self, defined):
        readable = [INPUT_VARIABLE] + sorted(defined)
        if self.rng.random() < 0.5:
            return Var(self._pick(readable))
        return Num(int(self.rng.integers(10)))

    def _expr(self, defined):
        if self.rng.random() < 0.6:
            return BinOp(self._pick(OPERATORS), self._atom(defined), self._atom(defined))
        return self._atom(defined)

    def _simple(self, defined):
        if self.rng.random() < 0.65:
            expr = self._expr(defined)
            target = self._pick(VARIABLES)
            defined.add(target)
            return Assign(target, expr)
        return Print(self._expr(defined))

    def _statement(self, defined):
        if self.rng.random() < 0.25:
            count = int(self.rng.integers(2, 4))
            body = tuple(self._simple(defined)
                         for _ in range(int(self.rng.integers(1, 3))))
            return Loop(count, body)
        return self._simple(defined)

    def generate(self, *, buggy=False):
        defined = set()
        statements = [self._statement(defined)
                      for _ in range(int(self.rng.integers(1, 3)))]
        statements.append(Print(self._expr(defined)))
        program = tuple(statements)
        if buggy:
            program = self._plant_defect(program)
        return program

    def _plant_defect(self, program):
        """ Rewrites one read so it touches a variable not yet assigned. """
        candidates, defined = [], set()
        for index, statement in enumerate(program):
            unassigned = [v for v in VARIABLES if v not in defined]
            if unassigned:
                candidates.append((index, unassigned))
            for inner in (statement.body if isinstance(statement, Loop) else (statement,)):
                if isinstance(inner, Assign):
                    defined.add(inner.target)
        index, unassigned = candidates[int(self.rng.integers(len(candidates)))]
        culprit = Var(self._pick(unassigned))

        def poisoned(statement):
            expr = statement.expr
            if isinstance(expr, BinOp):
                return replace(statement, expr=replace(expr, left=culprit))
            return replace(statement, expr=culprit)

        statement = program[index]
        if isinstance(statement, Loop):
            body = (poisoned(statement.body[0]),) + statement.body[1:]
            statement = replace(statement, body=body)
        else:
            statement = poisoned(statement)
        return program[:index] + (statement,) + program[index + 1:]
