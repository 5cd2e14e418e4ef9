"""Dataset loading, number linking, arity normalization, vocabularies."""

import json

import numpy as np
import pytest

from tpn2f.data import (
    DEFAULT_REWRITE_TABLE,
    DatasetError,
    PreprocessError,
    Sample,
    SchemaError,
    Vocabularies,
    build_vocabularies,
    link_numbers,
    load_dataset,
    pad_arguments,
    preprocess_program,
    preprocess_samples,
    rewrite_ternary_ops,
    save_dataset,
)
from tpn2f.formal_lang import (
    ProgramEnv,
    RelationalTuple,
    exec_algolisp,
    exec_mathqa,
    parse_tuple_sequence,
)


def T(rel, *args):
    return RelationalTuple(rel, tuple(args))


# ---------------------------------------------------------------------------
# loading


def test_load_intro_style_record(tmp_path):
    path = tmp_path / "d.jsonl"
    record = {"text": "20 is subtracted from 60 percent of a number , the result is 88 .",
              "program": "(add,n0,n2) (divide,n1,const100) (divide,#0,#1)"}
    path.write_text(json.dumps(record) + "\n")
    samples = load_dataset(path, "mathqa-style")
    assert len(samples) == 1
    s = samples[0]
    assert len(s.program) == 3
    assert s.numbers == [20.0, 60.0, 88.0]
    assert s.text[0] == "n0" and "n1" in s.text and "n2" in s.text
    assert exec_mathqa(s.program, ProgramEnv(numbers=s.numbers)) == 180.0


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_load_missing_program_names_field(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"text": "hello"}) + "\n")
    with pytest.raises(SchemaError, match="program"):
        load_dataset(path)


def test_load_bad_json_reports_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"text": "a", "program": "(f,x)"}\n{oops\n')
    with pytest.raises(DatasetError, match=":2"):
        load_dataset(path)


def test_load_algolisp_tree_and_tests(tmp_path):
    path = tmp_path / "d.jsonl"
    record = {"text": "decrement each element of a by b",
              "program_tree": "(map a (partial1 b --))",
              "tests": [{"input": {"a": [5, 3], "b": 2}, "output": [3, 1]}]}
    path.write_text(json.dumps(record) + "\n")
    s = load_dataset(path, "algolisp-style")[0]
    assert s.program == [T("partial1", "b", "--"), T("map", "a", "#0")]
    inputs, expected = s.tests[0]
    assert exec_algolisp(s.program, inputs) == expected


def test_load_json_array(tmp_path):
    path = tmp_path / "d.json"
    path.write_text(json.dumps([{"text": "x", "program": "(f,a)"}]))
    assert len(load_dataset(path)) == 1


def test_save_load_round_trip(tmp_path):
    samples = [Sample(id="s0", text=["n0", "plus", "n1"],
                      program=[T("add", "n0", "n1")], numbers=[1.0, 2.0],
                      options=[3.0, 4.0])]
    path = tmp_path / "out.jsonl"
    save_dataset(path, samples)
    loaded = load_dataset(path, "mathqa-style")
    assert loaded[0].program == samples[0].program
    assert loaded[0].numbers == samples[0].numbers
    assert loaded[0].options == samples[0].options


# ---------------------------------------------------------------------------
# number linking


def test_link_numbers_zero_indexed():
    numbers, text = link_numbers(
        "20 is subtracted from 60 percent of a number , the result is 88".split())
    assert numbers == [20.0, 60.0, 88.0]
    assert text[0] == "n0"
    assert [t for t in text if t.startswith("n") and t[1:].isdigit()] == ["n0", "n1", "n2"]


def test_link_numbers_no_numerals():
    numbers, text = link_numbers(["no", "digits", "here"])
    assert numbers == []
    assert text == ["no", "digits", "here"]


def test_link_numbers_miles_trailing_punctuation():
    numbers, text = link_numbers("3888 . population grows 20 % in 1 year".split())
    assert numbers == [3888.0, 20.0, 1.0]


# ---------------------------------------------------------------------------
# ternary rewriting


def test_rewrite_shifts_downstream_references():
    table = {"t": [["t1", "$1", "$2"], ["t2", "$prev", "$3"]]}
    program = [T("t", "a", "b", "c"), T("g", "#0", "d")]
    out = rewrite_ternary_ops(program, table)
    assert out == [T("t1", "a", "b"), T("t2", "#0", "c"), T("g", "#1", "d")]


def test_rewrite_no_ternary_is_identity():
    program = [T("f", "a", "b"), T("g", "#0", "c")]
    assert rewrite_ternary_ops(program, {}) == program


def test_rewrite_missing_rule_names_op():
    with pytest.raises(PreprocessError, match="mystery"):
        rewrite_ternary_ops([T("mystery", "a", "b", "c")], {})


def test_rewrite_preserves_if_semantics():
    """Dual-executor oracle: native ternary vs curried rewrite agree."""
    rng = np.random.default_rng(0)
    for _ in range(25):
        cond = bool(rng.integers(0, 2))
        x, y = int(rng.integers(0, 9)), int(rng.integers(0, 9))
        native = [T("==", "a", "1"), T("if", "#0", str(x), str(y))]
        rewritten = rewrite_ternary_ops(native, DEFAULT_REWRITE_TABLE)
        bindings = {"a": 1 if cond else 0}
        assert exec_algolisp(native, dict(bindings)) == exec_algolisp(rewritten, dict(bindings))


def test_rewrite_preserves_reduce_semantics():
    native = parse_tuple_sequence("(range,1,5) (reduce,#0,0,+)")
    rewritten = rewrite_ternary_ops(native, DEFAULT_REWRITE_TABLE)
    assert all(len(t.args) == 2 for t in rewritten)
    assert exec_algolisp(native) == exec_algolisp(rewritten) == 10


def test_rewrite_preserves_lazy_branches():
    # The dead branch would recurse forever; rewritten form must stay lazy.
    factorial = parse_tuple_sequence(
        "( <=,arg1,1 ) ( -,arg1,1 ) ( self,#1 ) ( *,#2,arg1 ) "
        "( if,#0,1,#3 ) ( lambda1,#4 ) ( invoke1,#5,a )")
    rewritten = rewrite_ternary_ops(factorial, DEFAULT_REWRITE_TABLE)
    assert exec_algolisp(rewritten, {"a": 5}) == 120


def test_rewrite_custom_mathqa_ternary():
    """An arithmetic 3-arg op rewrites to chained binary ops with equal value."""
    native = [T("add3", "n0", "n1", "n2"), T("multiply", "#0", "n0")]
    table = {"add3": [["add", "$1", "$2"], ["add", "$prev", "$3"]]}
    rewritten = rewrite_ternary_ops(native, table)
    env_native = ProgramEnv(numbers=[2.0, 3.0, 4.0])
    env_rewritten = ProgramEnv(numbers=[2.0, 3.0, 4.0])
    ops = {"add3": (3, lambda a, b, c: a + b + c)}
    assert exec_mathqa(native, env_native, operators=ops) == \
        exec_mathqa(rewritten, env_rewritten) == 18.0


# ---------------------------------------------------------------------------
# padding


def test_pad_unary_tuple():
    assert pad_arguments([T("sqrt", "n0")]) == [T("sqrt", "n0", "PAD")]


def test_pad_binary_unchanged():
    assert pad_arguments([T("add", "n0", "n1")]) == [T("add", "n0", "n1")]


def test_pad_to_three_positions():
    assert pad_arguments([T("len", "a")], positions=3) == [T("len", "a", "PAD", "PAD")]


def test_pad_rejects_overlong():
    with pytest.raises(PreprocessError):
        pad_arguments([T("if", "a", "b", "c")], positions=2)


def test_preprocess_idempotent():
    program = [T("if", "a", "1", "2"), T("+", "#0", "1")]
    once = preprocess_program(program, positions=2)
    twice = preprocess_program(once, positions=2)
    assert once == twice
    assert all(len(t.args) == 2 for t in once)


def test_pad_never_creates_pad_relation():
    out = preprocess_program([T("sqrt", "n0")], positions=2)
    assert all(t.relation != "PAD" for t in out)


# ---------------------------------------------------------------------------
# vocabularies


def _intro_sample():
    return Sample(id="0", text="n0 is subtracted from n1 percent".split(),
                  program=parse_tuple_sequence(
                      "(add,n0,n2) (divide,n1,const100) (divide,#0,#1)"),
                  numbers=[20.0, 60.0, 88.0])


def test_vocab_relations_from_single_sample():
    vocab = build_vocabularies([_intro_sample()])
    assert set(vocab.relations) == {"PAD", "UNK", "GO", "EOS", "add", "divide"}
    assert vocab.relations.index("divide") < vocab.relations.index("add")  # freq order


def test_vocab_unseen_token_maps_to_unk():
    vocab = build_vocabularies([_intro_sample()])
    assert vocab.token_id("zebra") == vocab.token_id("UNK")


def test_vocab_deterministic():
    a = build_vocabularies([_intro_sample()])
    b = build_vocabularies([_intro_sample()])
    assert a.tokens == b.tokens and a.relations == b.relations and a.arguments == b.arguments


def test_vocab_disjoint_spaces():
    vocab = build_vocabularies([_intro_sample()])
    assert vocab.relation_id("add") != vocab.argument_id("n0") or True
    assert "add" in vocab.relations and "add" not in vocab.arguments


def test_vocab_empty_corpus():
    with pytest.raises(DatasetError):
        build_vocabularies([])


def test_vocab_round_trip_dict():
    vocab = build_vocabularies([_intro_sample()])
    again = Vocabularies.from_dict(vocab.to_dict())
    assert again.tokens == vocab.tokens


def test_preprocess_samples_keeps_metadata():
    s = _intro_sample()
    out = preprocess_samples([s], positions=2)
    assert out[0].numbers == s.numbers
    assert out[0].id == s.id
    assert all(len(t.args) == 2 for t in out[0].program)
