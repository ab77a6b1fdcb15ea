"""Map perf samples to cost categories and compute their share of all samples.

Rule files are line oriented::

    # matcher<TAB>pattern<TAB>category
    prefix	sendm	PacketIO
    exact	recvmsg	PacketIO
    regex	^aes_.*_gcm	Crypto

The first matching rule wins.  Symbols no rule matches, and samples perf
could not symbolize, are ``Uncategorized``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional

from .parsers.perfscript import UNKNOWN


class Category(str, Enum):
    PACKET_IO = "PacketIO"
    FILE_IO = "FileIO"
    CRYPTO = "Crypto"
    CONNECTION_MANAGEMENT = "ConnectionManagement"
    UNCATEGORIZED = "Uncategorized"


MATCHERS = ("exact", "prefix", "regex")


class RuleError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class Rule:
    matcher: str
    pattern: str
    category: Category

    def __post_init__(self):
        if self.matcher not in MATCHERS:
            raise RuleError(f"unknown matcher {self.matcher!r}")
        if self.matcher == "regex":
            object.__setattr__(self, "_rx", re.compile(self.pattern))

    def matches(self, symbol: str) -> bool:
        if self.matcher == "exact":
            return symbol == self.pattern
        if self.matcher == "prefix":
            return symbol.startswith(self.pattern)
        return self._rx.search(symbol) is not None


@dataclass(frozen=True)
class CategoryRuleSet:
    rules: tuple = ()
    implementation: str = ""
    source_digest: str = ""

    def extended(self, *rules: Rule) -> "CategoryRuleSet":
        return CategoryRuleSet(self.rules + tuple(rules), self.implementation)


def _category(name: str, line: Optional[int]) -> Category:
    try:
        return Category(name)
    except ValueError:
        known = ", ".join(c.value for c in Category)
        raise RuleError(f"unknown category {name!r} (expected one of {known})", line) from None


def parse_rules(text: str, implementation: str = "") -> CategoryRuleSet:
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in raw.strip("\r\n").split("\t") if p != ""]
        if len(parts) != 3:
            raise RuleError("expected matcher<TAB>pattern<TAB>category", lineno)
        matcher, pattern, cat = (p.strip() for p in parts)
        if matcher not in MATCHERS:
            raise RuleError(f"unknown matcher {matcher!r}", lineno)
        category = _category(cat, lineno)
        try:
            rules.append(Rule(matcher, pattern, category))
        except re.error as exc:
            raise RuleError(f"malformed pattern {pattern!r}: {exc}", lineno) from None
    digest = hashlib.sha256(text.encode()).hexdigest()
    return CategoryRuleSet(tuple(rules), implementation, digest)


def shipped_rules() -> list:
    """Names of the rule files bundled with the package."""
    return sorted(p.name[: -len(".rules")] for p in resources.files("qbench").joinpath("rules").iterdir()
                  if p.name.endswith(".rules"))


def load_rules(path_or_name) -> CategoryRuleSet:
    """Load a rule file by path, or a bundled rule set by name (``lsquic``)."""
    path = Path(path_or_name)
    if path.is_file():
        return parse_rules(path.read_text(), path.stem)
    name = str(path_or_name)
    bundled = resources.files("qbench").joinpath("rules", f"{name}.rules")
    if bundled.is_file():
        return parse_rules(bundled.read_text(), name)
    raise FileNotFoundError(f"no rule file at {path_or_name!r} and no bundled rule set of that name")


def categorize_symbol(symbol: str, rules: CategoryRuleSet) -> Category:
    if not symbol or symbol == UNKNOWN:
        return Category.UNCATEGORIZED
    for rule in rules.rules:
        if rule.matches(symbol):
            return rule.category
    return Category.UNCATEGORIZED


def categorize_sample(sample, rules: CategoryRuleSet, scan_chain: bool = False) -> Category:
    """Leaf attribution; with ``scan_chain`` walk callers to the first hit."""
    frames = sample.chain if scan_chain and sample.chain else (sample.leaf,)
    for sym in frames:
        cat = categorize_symbol(sym, rules)
        if cat is not Category.UNCATEGORIZED:
            return cat
    return Category.UNCATEGORIZED


@dataclass
class CategoryBreakdown:
    counts: dict = field(default_factory=lambda: {c: 0 for c in Category})
    total_samples: int = 0
    matched_samples: int = 0

    def fraction(self, category: Category) -> Fraction:
        """Share of *all* samples (idle and other processes included)."""
        if self.total_samples == 0:
            return Fraction(0)
        return Fraction(self.counts[category], self.total_samples)

    def process_fraction(self, category: Category) -> Fraction:
        """Share of the samples of the filtered processes only."""
        if self.matched_samples == 0:
            return Fraction(0)
        return Fraction(self.counts[category], self.matched_samples)

    @property
    def fractions(self) -> dict:
        return {c: self.fraction(c) for c in Category}

    @property
    def categorized_samples(self) -> int:
        return self.matched_samples - self.counts[Category.UNCATEGORIZED]

    @property
    def empty(self) -> bool:
        return self.total_samples == 0

    def rows(self) -> list:
        return [
            {
                "category": c.value,
                "samples": self.counts[c],
                "fraction": float(self.fraction(c)),
                "process_fraction": float(self.process_fraction(c)),
            }
            for c in Category
        ]


def category_breakdown(samples, rules: CategoryRuleSet, process_filter: str = "", scan_chain: bool = False):
    """Count samples of processes matching ``process_filter`` per category.

    Fractions are relative to every sample in ``samples``, including idle
    and unrelated processes.
    """
    rx = re.compile(process_filter) if process_filter else None
    out = CategoryBreakdown()
    for s in samples:
        out.total_samples += s.weight
        if rx is not None and not rx.search(s.command):
            continue
        out.matched_samples += s.weight
        out.counts[categorize_sample(s, rules, scan_chain)] += s.weight
    return out
