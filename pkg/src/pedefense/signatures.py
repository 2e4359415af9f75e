"""Minimal signature rule language and matcher.

Rules are named pattern sets with a boolean condition, in a deliberately
small grammar (documented in ``docs/rules.md``):

    rule family_marker {
      strings:
        $a = "http://bad.example" nocase
        $b = { 4D 5A ?? 90 }
      condition:
        $a or $b
    }

Patterns are literal ASCII strings (supporting ``\\"``, ``\\\\`` and
``\\xNN`` escapes, optional ``nocase``) or hex byte patterns with ``??``
single-byte wildcards.  Conditions combine pattern identifiers with
``and``/``or``/``not``, parentheses, ``any of them``, ``all of them`` and
``N of them`` (count of distinct matched patterns).

Matching works on raw bytes.  Presence checks use the C substring search
(per pattern, worst case patterns x filesize); hex wildcards anchor on the
longest literal run and verify candidates in place.  Rule filtering keeps
only rules that matched at least one malware sample and zero benign
samples on a labeled calibration corpus.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple


class RuleSyntaxError(ValueError):
    """Rule text failed to parse."""


@dataclass(frozen=True)
class Pattern:
    pid: str
    literal: bytes                      # wildcard positions hold 0x00
    mask: Optional[Tuple[bool, ...]] = None   # True = literal byte; None = all literal
    nocase: bool = False

    def __post_init__(self):
        if not self.literal:
            raise RuleSyntaxError(f"pattern {self.pid} is empty")
        if self.mask is not None and not any(self.mask):
            raise RuleSyntaxError(f"pattern {self.pid} has no literal bytes")


# Condition AST nodes: ("id", pid) | ("and"|"or", a, b) | ("not", a)
# | ("ofthem", n) with n = -1 meaning "all".
Condition = tuple


@dataclass
class Rule:
    name: str
    patterns: List[Pattern]
    condition: Condition
    source: str = ""

    def __post_init__(self):
        declared = {p.pid for p in self.patterns}
        for pid in _condition_ids(self.condition):
            if pid not in declared:
                raise RuleSyntaxError(
                    f"rule {self.name}: condition references undeclared {pid}")
        if not self.patterns:
            raise RuleSyntaxError(f"rule {self.name} declares no patterns")


def _condition_ids(cond: Condition) -> Iterable[str]:
    kind = cond[0]
    if kind == "id":
        yield cond[1]
    elif kind in ("and", "or"):
        yield from _condition_ids(cond[1])
        yield from _condition_ids(cond[2])
    elif kind == "not":
        yield from _condition_ids(cond[1])


# --------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>//[^\n]*)
  | (?P<string>"(?:\\.|[^"\\])*")
  | (?P<hex>\{[0-9a-fA-F?\s]*\})
  | (?P<pid>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<int>\d+)
  | (?P<punct>[{}()=:])
""", re.VERBOSE)


def _tokenize(text: str) -> List[Tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r} at offset {pos}")
        pos = m.end()
        kind = m.lastgroup
        if kind in ("ws", "comment"):
            continue
        tokens.append((kind, m.group()))
    return tokens


def _decode_string_literal(token: str) -> bytes:
    body = token[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        ch = body[i]
        if ch != "\\":
            out += ch.encode("latin-1")
            i += 1
            continue
        esc = body[i + 1]
        if esc == "x":
            out.append(int(body[i + 2:i + 4], 16))
            i += 4
        elif esc in ('"', "\\"):
            out += esc.encode()
            i += 2
        elif esc == "n":
            out += b"\n"
            i += 2
        elif esc == "t":
            out += b"\t"
            i += 2
        else:
            raise RuleSyntaxError(f"unknown escape \\{esc}")
    return bytes(out)


def _decode_hex_pattern(token: str) -> Tuple[bytes, Tuple[bool, ...]]:
    parts = token[1:-1].split()
    literal = bytearray()
    mask = []
    for part in parts:
        if part == "??":
            literal.append(0)
            mask.append(False)
        elif len(part) == 2:
            literal.append(int(part, 16))
            mask.append(True)
        else:
            raise RuleSyntaxError(f"bad hex token {part!r}")
    return bytes(literal), tuple(mask)


class _Parser:
    def __init__(self, tokens: List[Tuple[str, str]]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Optional[Tuple[str, str]]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> Tuple[str, str]:
        tok = self.peek()
        if tok is None:
            raise RuleSyntaxError("unexpected end of input")
        self.pos += 1
        return tok

    def expect(self, value: str) -> None:
        kind, text = self.next()
        if text != value:
            raise RuleSyntaxError(f"expected {value!r}, got {text!r}")

    def parse_rules(self) -> List[Rule]:
        rules = []
        while self.peek() is not None:
            rules.append(self.parse_rule())
        return rules

    def parse_rule(self) -> Rule:
        start = self.pos
        self.expect("rule")
        kind, name = self.next()
        if kind != "word":
            raise RuleSyntaxError(f"expected rule name, got {name!r}")
        self.expect("{")
        self.expect("strings")
        self.expect(":")
        patterns = []
        while self.peek() and self.peek()[0] == "pid":
            patterns.append(self.parse_pattern())
        self.expect("condition")
        self.expect(":")
        condition = self.parse_or()
        self.expect("}")
        source_tokens = self.tokens[start:self.pos]
        return Rule(name=name, patterns=patterns, condition=condition,
                    source=" ".join(t for _, t in source_tokens))

    def parse_pattern(self) -> Pattern:
        _, pid = self.next()
        self.expect("=")
        kind, text = self.next()
        nocase = False
        if kind == "string":
            literal = _decode_string_literal(text)
            mask = None
            if self.peek() == ("word", "nocase"):
                self.next()
                nocase = True
                literal = literal.lower()
        elif kind == "hex":
            literal, mask = _decode_hex_pattern(text)
            if all(mask):
                mask = None
        else:
            raise RuleSyntaxError(f"expected pattern body, got {text!r}")
        return Pattern(pid=pid, literal=literal, mask=mask, nocase=nocase)

    def parse_or(self) -> Condition:
        node = self.parse_and()
        while self.peek() == ("word", "or"):
            self.next()
            node = ("or", node, self.parse_and())
        return node

    def parse_and(self) -> Condition:
        node = self.parse_not()
        while self.peek() == ("word", "and"):
            self.next()
            node = ("and", node, self.parse_not())
        return node

    def parse_not(self) -> Condition:
        if self.peek() == ("word", "not"):
            self.next()
            return ("not", self.parse_not())
        return self.parse_atom()

    def parse_atom(self) -> Condition:
        kind, text = self.next()
        if kind == "pid":
            return ("id", text)
        if text == "(":
            node = self.parse_or()
            self.expect(")")
            return node
        if text in ("any", "all"):
            self.expect("of")
            self.expect("them")
            return ("ofthem", 1 if text == "any" else -1)
        if kind == "int":
            self.expect("of")
            self.expect("them")
            return ("ofthem", int(text))
        raise RuleSyntaxError(f"unexpected token {text!r} in condition")


def parse_rules(text: str) -> List[Rule]:
    """Parse every rule block in ``text``."""
    return _Parser(_tokenize(text)).parse_rules()


def load_rules_file(path) -> List[Rule]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rules(fh.read())


# --------------------------------------------------------------------------
# matching

def _longest_literal_run(pattern: Pattern) -> Tuple[int, bytes]:
    best_start, best_len = 0, 0
    run_start = None
    mask = pattern.mask
    for i in range(len(mask) + 1):
        solid = i < len(mask) and mask[i]
        if solid and run_start is None:
            run_start = i
        elif not solid and run_start is not None:
            if i - run_start > best_len:
                best_start, best_len = run_start, i - run_start
            run_start = None
    return best_start, pattern.literal[best_start:best_start + best_len]


def _wildcard_present(pattern: Pattern, data: bytes) -> bool:
    anchor_off, anchor = _longest_literal_run(pattern)
    plen = len(pattern.literal)
    pos = data.find(anchor)
    while pos >= 0:
        start = pos - anchor_off
        if start >= 0 and start + plen <= len(data):
            window = data[start:start + plen]
            if all(not solid or window[i] == pattern.literal[i]
                   for i, solid in enumerate(pattern.mask)):
                return True
        pos = data.find(anchor, pos + 1)
    return False


def _pattern_present(pattern: Pattern, data: bytes,
                     lower_cache: List[Optional[bytes]]) -> bool:
    if pattern.mask is not None:
        return _wildcard_present(pattern, data)
    if pattern.nocase:
        if lower_cache[0] is None:
            lower_cache[0] = data.lower()
        return lower_cache[0].find(pattern.literal) >= 0
    return data.find(pattern.literal) >= 0


def _eval_condition(cond: Condition, hits: Dict[str, bool]) -> bool:
    kind = cond[0]
    if kind == "id":
        return hits[cond[1]]
    if kind == "and":
        return _eval_condition(cond[1], hits) and _eval_condition(cond[2], hits)
    if kind == "or":
        return _eval_condition(cond[1], hits) or _eval_condition(cond[2], hits)
    if kind == "not":
        return not _eval_condition(cond[1], hits)
    if kind == "ofthem":
        matched = sum(hits.values())
        need = len(hits) if cond[1] == -1 else cond[1]
        return matched >= need
    raise ValueError(f"bad condition node {cond!r}")


def match_rule(rule: Rule, data: bytes) -> bool:
    """Evaluate one rule against raw bytes."""
    lower_cache: List[Optional[bytes]] = [None]
    hits = {p.pid: _pattern_present(p, data, lower_cache) for p in rule.patterns}
    return _eval_condition(rule.condition, hits)


@dataclass
class RuleSet:
    rules: List[Rule]
    provenance: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def scan(self, data: bytes) -> List[str]:
        """Names of matching rules (shared lowercase buffer across rules)."""
        lower_cache: List[Optional[bytes]] = [None]
        matched = []
        for rule in self.rules:
            hits = {p.pid: _pattern_present(p, data, lower_cache)
                    for p in rule.patterns}
            if _eval_condition(rule.condition, hits):
                matched.append(rule.name)
        return matched

    def save(self, path) -> None:
        payload = {
            "format": "pedefense-ruleset",
            "version": 1,
            "rules": [r.source for r in self.rules],
            "provenance": self.provenance,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RuleSet":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != "pedefense-ruleset":
            raise ValueError(f"{path} is not a ruleset file")
        rules = [rule for src in payload["rules"] for rule in parse_rules(src)]
        return cls(rules=rules, provenance=payload.get("provenance", {}))


def scan(ruleset: RuleSet, data: bytes) -> List[str]:
    return ruleset.scan(data)


def filter_rules(rules: Sequence[Rule],
                 corpus: Iterable[Tuple[bytes, str]]) -> RuleSet:
    """Keep rules matching at least one malware sample and zero benign ones.

    ``corpus`` yields ``(bytes, label)`` with label ``"malware"`` or
    ``"benign"``.  Match counts for every candidate rule are recorded as
    provenance, including the dropped ones.
    """
    counts = {r.name: {"malware_matches": 0, "benign_matches": 0} for r in rules}
    for data, label in corpus:
        if label not in ("malware", "benign"):
            raise ValueError(f"bad corpus label {label!r}")
        key = "malware_matches" if label == "malware" else "benign_matches"
        for rule in rules:
            if match_rule(rule, data):
                counts[rule.name][key] += 1
    kept = [r for r in rules
            if counts[r.name]["malware_matches"] >= 1
            and counts[r.name]["benign_matches"] == 0]
    provenance = {name: dict(stats, kept=int(any(r.name == name for r in kept)))
                  for name, stats in counts.items()}
    return RuleSet(rules=kept, provenance=provenance)
