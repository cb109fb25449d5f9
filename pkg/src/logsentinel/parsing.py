"""Log template mining with a Drain-style fixed-depth parse tree.

Lines are masked (configurable regex rules), tokenized on whitespace, and
routed through a tree keyed first by token count, then by up to `depth - 2`
leading tokens (the final token never routes, since it is frequently a
parameter). Leaves hold templates of equal token count; the best match by
token-overlap similarity wins, with ties broken toward the lower key id.
Matching positions that differ are promoted to the wildcard marker.

A frozen table is immutable: unmatched lines map to the reserved UNSEEN_KEY
instead of minting new templates. At frozen-match time wildcard slots accept
any token; during mining they count as mismatches, like base Drain.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import EmptyContentError, FormatError
from .fileio import atomic_write_text

WILDCARD = "<*>"

# Reserved parser-level id for lines that match no template in a frozen table.
UNSEEN_KEY = -1

_TABLE_MAGIC = "DRAINTBL"
_TABLE_VERSION = "v1"

_HAS_DIGIT = re.compile(r"\d")


@dataclass
class MaskingRule:
    """Regex rewrite applied to line content before tokenization."""

    pattern: str
    replacement: str = WILDCARD

    def __post_init__(self):
        self._compiled = re.compile(self.pattern)

    def apply(self, text: str) -> str:
        return self._compiled.sub(self.replacement, text)


@dataclass
class LogTemplate:
    """Mined message template; wildcard tokens match any single token."""

    key_id: int
    tokens: list
    match_count: int = 0

    def text(self) -> str:
        return " ".join(self.tokens)


class _Node:
    __slots__ = ("children", "leaf")

    def __init__(self):
        self.children: dict = {}
        self.leaf: list = []


def _mask_and_tokenize(content: str, masking_rules) -> list:
    for rule in masking_rules:
        content = rule.apply(content)
    tokens = content.split()
    if not tokens:
        raise EmptyContentError("line has no tokens after preprocessing")
    return tokens


def _routing_tokens(tokens, depth: int):
    return tokens[: max(0, min(depth - 2, len(tokens) - 1))]


def _walk(root: _Node, tokens, depth: int):
    """Follow the routing path for `tokens`; returns the leaf node or None."""
    node = root.children.get(str(len(tokens)))
    if node is None:
        return None
    for token in _routing_tokens(tokens, depth):
        child = node.children.get(token)
        if child is None:
            child = node.children.get(WILDCARD)
        if child is None:
            return None
        node = child
    return node


def _similarity(template_tokens, tokens, wildcard_matches: bool) -> float:
    equal = 0
    for t_tok, tok in zip(template_tokens, tokens):
        if t_tok == tok or (wildcard_matches and t_tok == WILDCARD):
            equal += 1
    return equal / len(tokens)


def _best_match(templates, candidate_ids, tokens, wildcard_matches: bool):
    """Highest-similarity candidate; ties go to the lower key id."""
    best_id, best_sim = None, -1.0
    for tid in candidate_ids:
        sim = _similarity(templates[tid].tokens, tokens, wildcard_matches)
        if sim > best_sim:
            best_id, best_sim = tid, sim
    return best_id, best_sim


class TemplateMiner:
    """Single-writer template miner; freeze() yields a shareable read-only table."""

    def __init__(self, depth: int = 4, sim_threshold: float = 0.5, max_children: int = 100,
                 masking_rules=(), parametrize_numeric_tokens: bool = True):
        if depth < 2:
            raise ValueError("depth must be at least 2")
        if not 0.0 < sim_threshold <= 1.0:
            raise ValueError("sim_threshold must be in (0, 1]")
        if max_children < 1:
            raise ValueError("max_children must be at least 1")
        self.depth = depth
        self.sim_threshold = sim_threshold
        self.max_children = max_children
        self.masking_rules = tuple(masking_rules)
        self.parametrize_numeric_tokens = parametrize_numeric_tokens
        self.templates: list = []
        self._root = _Node()

    def parse_line(self, content: str) -> int:
        """Map one line of content to a key id, mining a new template if needed."""
        tokens = _mask_and_tokenize(content, self.masking_rules)
        leaf_node = _walk(self._root, tokens, self.depth)
        if leaf_node is not None:
            best_id, best_sim = _best_match(self.templates, leaf_node.leaf, tokens,
                                            wildcard_matches=False)
            if best_id is not None and best_sim >= self.sim_threshold:
                template = self.templates[best_id]
                template.tokens = [t if t == tok else WILDCARD
                                   for t, tok in zip(template.tokens, tokens)]
                template.match_count += 1
                return best_id
        template = LogTemplate(key_id=len(self.templates), tokens=list(tokens), match_count=1)
        self.templates.append(template)
        self._insert(tokens, template.key_id)
        return template.key_id

    def _insert(self, tokens, key_id: int) -> None:
        node = self._root.children.setdefault(str(len(tokens)), _Node())
        for token in _routing_tokens(tokens, self.depth):
            if token in node.children:
                node = node.children[token]
                continue
            if self.parametrize_numeric_tokens and _HAS_DIGIT.search(token):
                node = node.children.setdefault(WILDCARD, _Node())
                continue
            if WILDCARD in node.children:
                if len(node.children) < self.max_children:
                    node = node.children.setdefault(token, _Node())
                else:
                    node = node.children[WILDCARD]
            else:
                if len(node.children) + 1 < self.max_children:
                    node = node.children.setdefault(token, _Node())
                else:
                    node = node.children.setdefault(WILDCARD, _Node())
        node.leaf.append(key_id)

    def freeze(self) -> "FrozenTemplateTable":
        """Immutable snapshot; requires at least one mined template."""
        if not self.templates:
            raise ValueError("cannot freeze an empty template table")
        return FrozenTemplateTable(
            depth=self.depth, sim_threshold=self.sim_threshold,
            templates=[LogTemplate(t.key_id, list(t.tokens), t.match_count)
                       for t in self.templates],
            masking_rules=self.masking_rules)

    def save(self, path: str) -> None:
        _save_templates(self.templates, self.depth, self.sim_threshold, path)


class FrozenTemplateTable:
    """Read-only template table; unmatched lines map to UNSEEN_KEY."""

    def __init__(self, depth: int, sim_threshold: float, templates, masking_rules=()):
        if not templates:
            raise FormatError("template table must contain at least one template")
        self.depth = depth
        self.sim_threshold = sim_threshold
        self.templates = tuple(templates)
        self.masking_rules = tuple(masking_rules)
        self._root = _Node()
        miner_view = TemplateMiner(depth=depth, sim_threshold=sim_threshold)
        miner_view._root = self._root
        for template in self.templates:
            miner_view._insert(template.tokens, template.key_id)

    def __len__(self) -> int:
        return len(self.templates)

    def parse_line(self, content: str) -> int:
        tokens = _mask_and_tokenize(content, self.masking_rules)
        leaf_node = _walk(self._root, tokens, self.depth)
        if leaf_node is None:
            return UNSEEN_KEY
        best_id, best_sim = _best_match(self.templates, leaf_node.leaf, tokens,
                                        wildcard_matches=True)
        if best_id is None or best_sim < self.sim_threshold:
            return UNSEEN_KEY
        return best_id

    def save(self, path: str) -> None:
        _save_templates(self.templates, self.depth, self.sim_threshold, path)


def _save_templates(templates, depth: int, sim_threshold: float, path: str) -> None:
    lines = [f"{_TABLE_MAGIC} {_TABLE_VERSION} depth={depth} sim={sim_threshold!r}"]
    for template in templates:
        lines.append(f"{template.key_id}\t{' '.join(template.tokens)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_templates(path: str, masking_rules=()) -> FrozenTemplateTable:
    """Load a frozen table; round-trips key assignments for any line."""
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().rstrip("\n")
        match = re.fullmatch(
            rf"{_TABLE_MAGIC} (v\d+) depth=(\d+) sim=([0-9.eE+-]+)", header)
        if match is None:
            raise FormatError(f"{path}: bad template table header {header!r}")
        if match.group(1) != _TABLE_VERSION:
            raise FormatError(f"{path}: unsupported table version {match.group(1)}")
        depth, sim_threshold = int(match.group(2)), float(match.group(3))
        templates = []
        for lineno, line in enumerate(handle, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise FormatError(f"{path}:{lineno}: expected `<key_id>\\t<tokens>`")
            try:
                key_id = int(fields[0])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad key id") from exc
            tokens = fields[1].split()
            if not tokens:
                raise FormatError(f"{path}:{lineno}: template has no tokens")
            templates.append(LogTemplate(key_id=key_id, tokens=tokens))
    if not templates:
        raise FormatError(f"{path}: empty template table")
    if sorted(t.key_id for t in templates) != list(range(len(templates))):
        raise FormatError(f"{path}: key ids are not contiguous from 0")
    templates.sort(key=lambda t: t.key_id)
    return FrozenTemplateTable(depth=depth, sim_threshold=sim_threshold,
                               templates=templates, masking_rules=masking_rules)


# ---------------------------------------------------------------------------
# Dataset presets: header stripping, labels, timestamps, session extraction
# ---------------------------------------------------------------------------

@dataclass
class ParsedLine:
    content: str
    label: int = 0
    timestamp: float | None = None


@dataclass(frozen=True)
class DatasetPreset:
    """Per-dataset line handling: content regex, masking, labels, timestamps.

    `content_pattern` must expose a named `content` group and may expose
    `label` (dash means normal) and `ts` (epoch seconds) groups. Lines that
    do not match are skipped by callers.
    """

    name: str
    content_pattern: str
    masking: tuple = ()
    session_regex: str | None = None

    def extract(self, line: str) -> ParsedLine | None:
        match = re.match(self.content_pattern, line.rstrip("\n"))
        if match is None:
            return None
        groups = match.groupdict()
        label = 0
        if groups.get("label") is not None:
            label = 0 if groups["label"] == "-" else 1
        timestamp = None
        if groups.get("ts") is not None:
            timestamp = float(groups["ts"])
        return ParsedLine(content=groups["content"], label=label, timestamp=timestamp)


PRESETS = {
    "generic": DatasetPreset(
        name="generic",
        content_pattern=r"(?P<content>.*)",
    ),
    "hdfs": DatasetPreset(
        name="hdfs",
        # <date> <time> <pid> <level> <component>: <content>
        content_pattern=r"\d{6}\s+\d{6}\s+\d+\s+[A-Z]+\s+\S+:\s+(?P<content>.*)",
        masking=(
            MaskingRule(r"blk_-?\d+"),
            MaskingRule(r"(\d{1,3}\.){3}\d{1,3}(:\d+)?"),
        ),
        session_regex=r"(blk_-?\d+)",
    ),
    "bgl": DatasetPreset(
        name="bgl",
        # <label> <epoch> <date> <node> <time> <node> <type> <component> <level> <content>
        content_pattern=(r"(?P<label>\S+)\s+(?P<ts>\d+)\s+\S+\s+\S+\s+\S+\s+\S+\s+"
                         r"\S+\s+\S+\s+\S+\s+(?P<content>.*)"),
        masking=(
            MaskingRule(r"0x[0-9a-fA-F]+"),
            MaskingRule(r"(?<=[ =:])\d+(?=[ .,]|$)"),
        ),
    ),
    "thunderbird": DatasetPreset(
        name="thunderbird",
        # <label> <epoch> <date> <user> <month> <day> <time> <location> <component>: <content>
        content_pattern=(r"(?P<label>\S+)\s+(?P<ts>\d+)\s+\S+\s+\S+\s+\S+\s+\S+\s+"
                         r"\S+\s+\S+\s+\S+?:?\s+(?P<content>.*)"),
        masking=(
            MaskingRule(r"0x[0-9a-fA-F]+"),
            MaskingRule(r"(\d{1,3}\.){3}\d{1,3}(:\d+)?"),
        ),
    ),
}
