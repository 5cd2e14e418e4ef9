"""Dataset ingestion, number linking, preprocessing, and vocabularies.

Input records are JSON-lines (or a JSON array) with fields
``{text, program | program_tree, numbers?, options?, tests?}``.  Text numerals
are linked left-to-right to zero-indexed slots (first number -> n0), ternary
relations are rewritten to chained binary tuples through a fresh #k, and
every tuple is padded with PAD up to the configured argument count.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .formal_lang import (
    PAD_SYMBOL,
    RelationalTuple,
    flatten_program_tree,
    parse_tuple_sequence,
)

GO_SYMBOL = "GO"
EOS_SYMBOL = "EOS"
UNK_SYMBOL = "UNK"
SPECIAL_SYMBOLS = (PAD_SYMBOL, UNK_SYMBOL, GO_SYMBOL, EOS_SYMBOL)

_REF_RE = re.compile(r"^#(\d+)$")
_TOKEN_NUMBER_RE = re.compile(r"^(\d+(?:\.\d+)?)[.,?!%:;]*$")


class DatasetError(ValueError):
    """Unreadable or malformed dataset file."""


class SchemaError(DatasetError):
    """A record is missing a required field or has the wrong type."""


class PreprocessError(ValueError):
    """A program cannot be normalized (e.g. ternary op without a rewrite rule)."""


@dataclass
class Sample:
    id: str
    text: list[str]
    program: list[RelationalTuple]
    numbers: list[float] = field(default_factory=list)
    tests: list[tuple[dict, Any]] | None = None
    options: list[float] | None = None


def link_numbers(tokens: Sequence[str]) -> tuple[list[float], list[str]]:
    """Extract numerals left-to-right and replace them with n0, n1, ...

    Zero-indexed: the first number mentioned becomes n0.  Trailing punctuation
    on a numeral token is dropped.
    """
    numbers: list[float] = []
    out: list[str] = []
    for tok in tokens:
        m = _TOKEN_NUMBER_RE.match(tok)
        if m:
            out.append(f"n{len(numbers)}")
            numbers.append(float(m.group(1)))
        else:
            out.append(tok)
    return numbers, out


def _normalize_const(symbol: str) -> str:
    # "const-100" is a tokenization artifact for "const100".
    if symbol.startswith("const-"):
        return "const" + symbol[len("const-"):]
    return symbol


def _tuple_from_record(entry) -> RelationalTuple:
    if not isinstance(entry, (list, tuple)) or len(entry) < 2:
        raise SchemaError(f"program entries need [relation, arg, ...], got {entry!r}")
    rel, *args = (str(x) for x in entry)
    return RelationalTuple(rel, tuple(_normalize_const(a) for a in args))


def _parse_program(value) -> list[RelationalTuple]:
    if isinstance(value, str):
        parsed = parse_tuple_sequence(value)
        return [RelationalTuple(t.relation, tuple(_normalize_const(a) for a in t.args))
                for t in parsed]
    if isinstance(value, list):
        return [_tuple_from_record(e) for e in value]
    raise SchemaError(f"program must be a string or list, got {type(value).__name__}")


def _parse_tests(value) -> list[tuple[dict, Any]]:
    tests = []
    for entry in value:
        if isinstance(entry, dict):
            if "input" not in entry or "output" not in entry:
                raise SchemaError("each test needs 'input' and 'output'")
            tests.append((dict(entry["input"]), entry["output"]))
        elif isinstance(entry, (list, tuple)) and len(entry) == 2:
            tests.append((dict(entry[0]), entry[1]))
        else:
            raise SchemaError(f"malformed test entry {entry!r}")
    return tests


def _sample_from_record(record: dict, index: int, fmt: str) -> Sample:
    if not isinstance(record, dict):
        raise SchemaError(f"record {index} is not an object")
    if "text" not in record:
        raise SchemaError(f"record {index} is missing field 'text'")
    raw_text = record["text"]
    tokens = raw_text.split() if isinstance(raw_text, str) else [str(t) for t in raw_text]

    if "program" in record:
        program = _parse_program(record["program"])
    elif "program_tree" in record and fmt == "algolisp-style":
        program = flatten_program_tree(record["program_tree"])
    else:
        missing = "program_tree" if fmt == "algolisp-style" else "program"
        raise SchemaError(f"record {index} is missing field '{missing}' (or 'program')")

    if "numbers" in record:
        numbers = [float(x) for x in record["numbers"]]
        text = tokens
    elif fmt == "mathqa-style":
        numbers, text = link_numbers(tokens)
    else:
        numbers, text = [], tokens

    return Sample(
        id=str(record.get("id", index)),
        text=text,
        program=program,
        numbers=numbers,
        tests=_parse_tests(record["tests"]) if record.get("tests") is not None else None,
        options=[float(x) for x in record["options"]] if record.get("options") else None,
    )


def load_dataset(path, fmt: str = "mathqa-style") -> list[Sample]:
    """Read JSON-lines (or one JSON array) of records into normalized Samples."""
    if fmt not in ("mathqa-style", "algolisp-style"):
        raise ValueError(f"unknown dataset format {fmt!r}")
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    stripped = raw.lstrip()
    records: list[tuple[int, dict]] = []
    if not stripped:
        return []
    if stripped.startswith("["):
        try:
            arr = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON array: {exc}") from exc
        records = list(enumerate(arr))
    else:
        for lineno, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
    samples = []
    for index, record in records:
        try:
            samples.append(_sample_from_record(record, index, fmt))
        except SchemaError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
    return samples


def save_dataset(path, samples: Sequence[Sample]) -> None:
    """Write samples as JSON-lines loadable by ``load_dataset``."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record: dict[str, Any] = {
                "id": s.id,
                "text": s.text,
                "program": [[t.relation, *t.args] for t in s.program],
                "numbers": s.numbers,
            }
            if s.options is not None:
                record["options"] = s.options
            if s.tests is not None:
                record["tests"] = [{"input": i, "output": o} for i, o in s.tests]
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# preprocessing transforms


# Default currying rewrites for three-argument relations when the model runs
# with two argument positions.  The curried pair keeps lazy-branch semantics.
DEFAULT_REWRITE_TABLE: dict[str, list[list[str]]] = {
    "if": [["if1", "$1", "$2"], ["if2", "$prev", "$3"]],
    "reduce": [["reduce1", "$1", "$2"], ["reduce2", "$prev", "$3"]],
}


def _instantiate(template: list[str], args: tuple[str, ...], prev_ref: str | None) -> RelationalTuple:
    def fill(slot: str) -> str:
        if slot == "$1":
            return args[0]
        if slot == "$2":
            return args[1]
        if slot == "$3":
            return args[2]
        if slot == "$prev":
            if prev_ref is None:
                raise PreprocessError("$prev used in the first template tuple")
            return prev_ref
        return slot

    return RelationalTuple(fill(template[0]), tuple(fill(s) for s in template[1:]))


def rewrite_ternary_ops(program: Sequence[RelationalTuple],
                        table: dict[str, list[list[str]]] | None = None) -> list[RelationalTuple]:
    """Expand each 3-argument tuple into two chained binary tuples.

    Downstream #-references are renumbered to the final tuple of each
    expansion.  A 3-argument relation absent from the table is an error.
    """
    if table is None:
        table = DEFAULT_REWRITE_TABLE
    out: list[RelationalTuple] = []
    result_index: dict[int, int] = {}

    def remap(symbol: str) -> str:
        m = _REF_RE.match(symbol)
        if not m:
            return symbol
        old = int(m.group(1))
        if old not in result_index:
            raise PreprocessError(f"forward or dangling reference {symbol}")
        return f"#{result_index[old]}"

    for step, tup in enumerate(program):
        args = tuple(remap(a) for a in tup.args)
        if len(args) == 3:
            if tup.relation not in table:
                raise PreprocessError(
                    f"no rewrite rule for 3-argument relation {tup.relation!r}")
            first, second = table[tup.relation]
            t1 = _instantiate(first, args, None)
            out.append(t1)
            t2 = _instantiate(second, args, f"#{len(out) - 1}")
            out.append(t2)
        else:
            out.append(RelationalTuple(tup.relation, args))
        result_index[step] = len(out) - 1
    return out


def pad_arguments(program: Sequence[RelationalTuple], positions: int = 2) -> list[RelationalTuple]:
    """Append PAD so every tuple carries exactly ``positions`` arguments."""
    out = []
    for tup in program:
        if len(tup.args) > positions:
            raise PreprocessError(
                f"{tup.relation} has {len(tup.args)} arguments; rewrite before padding")
        args = tup.args + (PAD_SYMBOL,) * (positions - len(tup.args))
        out.append(RelationalTuple(tup.relation, args))
    return out


def preprocess_program(program: Sequence[RelationalTuple], positions: int = 2,
                       rewrite_table: dict | None = None) -> list[RelationalTuple]:
    """Arity normalization: rewrite ternaries when positions == 2, then pad."""
    if positions == 2:
        program = rewrite_ternary_ops(program, rewrite_table)
    return pad_arguments(program, positions)


def preprocess_samples(samples: Sequence[Sample], positions: int = 2,
                       rewrite_table: dict | None = None) -> list[Sample]:
    return [
        Sample(id=s.id, text=s.text,
               program=preprocess_program(s.program, positions, rewrite_table),
               numbers=s.numbers, tests=s.tests, options=s.options)
        for s in samples
    ]


def load_rewrite_table(path) -> dict[str, list[list[str]]]:
    table = json.loads(Path(path).read_text(encoding="utf-8"))
    for op, templates in table.items():
        if len(templates) != 2 or any(not isinstance(t, list) for t in templates):
            raise PreprocessError(f"rewrite rule for {op!r} must be two template tuples")
    return table


# ---------------------------------------------------------------------------
# vocabularies


@dataclass
class Vocabularies:
    """Disjoint id spaces for text tokens, relations, and arguments."""

    tokens: list[str]
    relations: list[str]
    arguments: list[str]

    def __post_init__(self):
        self._token_ids = {s: i for i, s in enumerate(self.tokens)}
        self._relation_ids = {s: i for i, s in enumerate(self.relations)}
        self._argument_ids = {s: i for i, s in enumerate(self.arguments)}

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_arguments(self) -> int:
        return len(self.arguments)

    def token_id(self, tok: str) -> int:
        return self._token_ids.get(tok, self._token_ids[UNK_SYMBOL])

    def relation_id(self, sym: str) -> int:
        return self._relation_ids.get(sym, self._relation_ids[UNK_SYMBOL])

    def argument_id(self, sym: str) -> int:
        return self._argument_ids.get(sym, self._argument_ids[UNK_SYMBOL])

    def encode_text(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_id(t) for t in tokens]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "relations": self.relations,
                "arguments": self.arguments}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabularies":
        return cls(tokens=list(d["tokens"]), relations=list(d["relations"]),
                   arguments=list(d["arguments"]))


def _ordered_by_frequency(counts: dict[str, int]) -> list[str]:
    return sorted(counts, key=lambda s: (-counts[s], s))


def build_vocabularies(samples: Sequence[Sample]) -> Vocabularies:
    """Frequency-then-lexicographic vocabularies with the special symbols.

    GO/EOS/PAD/UNK are prepended to both the relation and argument spaces;
    EOS doubles as the decoder's stop relation.
    """
    if not samples:
        raise DatasetError("cannot build vocabularies from an empty corpus")
    tok_counts: dict[str, int] = {}
    rel_counts: dict[str, int] = {}
    arg_counts: dict[str, int] = {}
    for s in samples:
        for t in s.text:
            tok_counts[t] = tok_counts.get(t, 0) + 1
        for tup in s.program:
            rel_counts[tup.relation] = rel_counts.get(tup.relation, 0) + 1
            for a in tup.args:
                if a not in SPECIAL_SYMBOLS:
                    arg_counts[a] = arg_counts.get(a, 0) + 1
    return Vocabularies(
        tokens=[UNK_SYMBOL] + _ordered_by_frequency(tok_counts),
        relations=list(SPECIAL_SYMBOLS) + _ordered_by_frequency(rel_counts),
        arguments=list(SPECIAL_SYMBOLS) + _ordered_by_frequency(arg_counts),
    )
