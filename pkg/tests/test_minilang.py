import numpy as np
import pytest

from modules.errors import ConfigError
from modules.minilang import (Assign, BinOp, Loop, Num, ParseError, Print, ProgramGenerator,
                              UseBeforeAssign, Var, describe, has_use_before_assign, parse,
                              render, run)

PROGRAM = (Assign("a", BinOp("+", Var("n"), Num(3))),
           Loop(2, (Print(Var("a")),)))


def test_render_both_languages():
    assert render(PROGRAM, "alpha") == "let a = n + 3 ; loop 2 { print a ; }"
    assert render(PROGRAM, "beta") == "a <- plus n 3 . loop 2 times begin show a . end"
    with pytest.raises(ConfigError):
        render(PROGRAM, "gamma")


def test_describe_is_language_free():
    assert describe(PROGRAM) == "set a to n plus 3 then repeat 2 times output a done"


def test_run_and_parse_agree():
    assert run(PROGRAM, 4) == [7, 7]
    for language in ("alpha", "beta"):
        assert parse(render(PROGRAM, language), language) == PROGRAM


def test_use_before_assign():
    broken = (Print(BinOp("*", Var("b"), Num(2))),)
    with pytest.raises(UseBeforeAssign):
        run(broken, 1)
    assert has_use_before_assign(broken)
    assert not has_use_before_assign(PROGRAM)


def test_parse_errors():
    with pytest.raises(ParseError):
        parse("let a = ;", "alpha")
    with pytest.raises(ParseError):
        parse("show a", "beta")


def test_generated_programs_carry_their_label():
    generator = ProgramGenerator(np.random.default_rng(0))
    for _ in range(200):
        clean = generator.generate()
        buggy = generator.generate(buggy=True)
        assert not has_use_before_assign(clean)
        assert has_use_before_assign(buggy)
        for language in ("alpha", "beta"):
            assert parse(render(buggy, language), language) == buggy
