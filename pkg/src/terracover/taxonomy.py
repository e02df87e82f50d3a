"""CORINE three-level class hierarchy and code/level/index conversions.

Codes are decimal integers whose digit count gives the level: ``3`` is a
level-1 code, ``31`` level 2, ``312`` level 3. Within a level, classes are
indexed by ascending code, so index ``0`` at level 3 is code ``111``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable

from .errors import TaxonomyError

LEVELS = (1, 2, 3)
EXPECTED_COUNTS = {1: 5, 2: 15, 3: 43}
DEFAULT_SOURCE = "corine_clc.tsv"


def code_level(code: int) -> int:
    """Level of a CORINE code, from its number of decimal digits."""
    if not isinstance(code, int) or isinstance(code, bool) or code <= 0:
        raise TaxonomyError(f"invalid class code {code!r}")
    level = len(str(code))
    if level not in LEVELS:
        raise TaxonomyError(f"code {code} has invalid digit count {level}")
    return level


def lift_code(code: int, target_level: int) -> int:
    """Return the ``target_level`` decimal prefix of ``code``."""
    level = code_level(code)
    if target_level not in LEVELS:
        raise TaxonomyError(f"invalid level {target_level}")
    if target_level > level:
        raise TaxonomyError(
            f"cannot lift level-{level} code {code} to finer level {target_level}")
    return code // 10 ** (level - target_level)


@dataclass(frozen=True)
class Node:
    code: int
    name: str
    level: int
    reference_image_count: int | None = None


@dataclass(frozen=True)
class LabelSet:
    """A set of contiguous class indices at one hierarchy level."""

    level: int
    indices: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "indices", frozenset(int(i) for i in self.indices))

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(sorted(self.indices))

    def __contains__(self, item):
        return item in self.indices

    def sorted(self) -> list[int]:
        return sorted(self.indices)


class Taxonomy:
    """Immutable CORINE hierarchy with per-level code<->index bijections."""

    def __init__(self, nodes: Iterable[Node]):
        self._nodes = {n.code: n for n in nodes}
        self._codes = {
            lvl: sorted(c for c, n in self._nodes.items() if n.level == lvl)
            for lvl in LEVELS
        }
        self._index = {lvl: {c: i for i, c in enumerate(codes)}
                       for lvl, codes in self._codes.items()}

    @property
    def nodes(self) -> list[Node]:
        return [self._nodes[c] for lvl in LEVELS for c in self._codes[lvl]]

    def node(self, code: int) -> Node:
        try:
            return self._nodes[code]
        except KeyError:
            raise TaxonomyError(f"unknown class code {code}") from None

    def codes(self, level: int) -> list[int]:
        self._check_level(level)
        return list(self._codes[level])

    def num_classes(self, level: int) -> int:
        self._check_level(level)
        return len(self._codes[level])

    def level_counts(self) -> dict[int, int]:
        return {lvl: len(self._codes[lvl]) for lvl in LEVELS}

    def code_to_index(self, code: int, level: int) -> int:
        self._check_level(level)
        try:
            return self._index[level][code]
        except KeyError:
            raise TaxonomyError(f"unknown level-{level} code {code}") from None

    def index_to_code(self, index: int, level: int) -> int:
        self._check_level(level)
        codes = self._codes[level]
        if not 0 <= index < len(codes):
            raise TaxonomyError(
                f"index {index} out of range for level {level} (K={len(codes)})")
        return codes[index]

    def name(self, index: int, level: int) -> str:
        return self._nodes[self.index_to_code(index, level)].name

    def label_set(self, level: int, indices: Iterable[int]) -> LabelSet:
        """Build a LabelSet, validating every index against the level."""
        k = self.num_classes(level)
        indices = frozenset(int(i) for i in indices)
        bad = [i for i in indices if not 0 <= i < k]
        if bad:
            raise TaxonomyError(f"indices {sorted(bad)} out of range for level {level}")
        return LabelSet(level, indices)

    def lift_index(self, index: int, from_level: int, to_level: int) -> int:
        code = lift_code(self.index_to_code(index, from_level), to_level)
        return self.code_to_index(code, to_level)

    def lift_table(self, from_level: int, to_level: int) -> list[int]:
        """Lookup table mapping every ``from_level`` index to its ``to_level`` index."""
        return [self.lift_index(i, from_level, to_level)
                for i in range(self.num_classes(from_level))]

    def lift_label_set(self, labels: LabelSet, target_level: int) -> LabelSet:
        if target_level > labels.level:
            raise TaxonomyError(
                f"cannot lift level-{labels.level} labels to finer level {target_level}")
        return LabelSet(target_level, {self.lift_index(i, labels.level, target_level)
                                       for i in labels.indices})

    def lift_codes(self, codes: Iterable[int], target_level: int) -> set[int]:
        return {lift_code(c, target_level) for c in codes}

    def legend_rows(self, level: int) -> list[tuple[int, int, str]]:
        return [(i, c, self._nodes[c].name) for i, c in enumerate(self.codes(level))]

    def _check_level(self, level):
        if level not in LEVELS:
            raise TaxonomyError(f"invalid level {level!r}; expected 1, 2 or 3")


def _parse_lines(text: str, origin: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in raw.rstrip("\r\n").split("\t")]
        if len(parts) < 2 or not parts[1]:
            raise TaxonomyError(f"{origin}:{lineno}: expected code<TAB>name[<TAB>count]")
        try:
            code = int(parts[0])
        except ValueError:
            raise TaxonomyError(f"{origin}:{lineno}: invalid code {parts[0]!r}") from None
        count = None
        if len(parts) > 2 and parts[2]:
            try:
                count = int(parts[2].replace(" ", ""))
            except ValueError:
                raise TaxonomyError(
                    f"{origin}:{lineno}: invalid image count {parts[2]!r}") from None
            if count < 0:
                raise TaxonomyError(f"{origin}:{lineno}: negative image count")
        yield lineno, code, parts[1], count


def load_taxonomy(source: str | None = None, extra_classes: str | None = None) -> Taxonomy:
    """Parse a taxonomy definition.

    ``source`` is the text of a ``code<TAB>name<TAB>count`` file; when omitted
    the bundled CORINE table is used. It must list exactly 43 level-3 classes.
    Missing level-1/2 parents are synthesized from code prefixes.
    ``extra_classes`` is optional text in the same format whose entries must
    all be new level-3 codes; they are appended after validation.
    """
    if source is None:
        source = default_source_text()
    nodes: dict[int, Node] = {}

    def add(text, origin, only_level3):
        for lineno, code, name, count in _parse_lines(text, origin):
            try:
                level = code_level(code)
            except TaxonomyError as exc:
                raise TaxonomyError(f"{origin}:{lineno}: {exc.args[0]}") from None
            if only_level3 and level != 3:
                raise TaxonomyError(
                    f"{origin}:{lineno}: extra class {code} is not a 3-digit code")
            if code in nodes:
                raise TaxonomyError(f"{origin}:{lineno}: duplicate code {code}")
            nodes[code] = Node(code, name, level, count if level == 3 else None)

    add(source, "taxonomy", only_level3=False)
    n3 = sum(1 for n in nodes.values() if n.level == 3)
    if n3 != EXPECTED_COUNTS[3]:
        raise TaxonomyError(
            f"missing level-3 entries: found {n3}, expected {EXPECTED_COUNTS[3]}")
    if extra_classes:
        add(extra_classes, "extra-classes", only_level3=True)

    for code in [c for c, n in nodes.items() if n.level == 3]:
        for lvl in (1, 2):
            parent = lift_code(code, lvl)
            if parent not in nodes:
                nodes[parent] = Node(parent, f"CLC {parent}", lvl)
    return Taxonomy(nodes.values())


def default_source_text() -> str:
    return resources.files("terracover").joinpath("data", DEFAULT_SOURCE).read_text("utf-8")


_DEFAULT: Taxonomy | None = None


def default_taxonomy() -> Taxonomy:
    """The bundled CORINE hierarchy, loaded once."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_taxonomy()
    return _DEFAULT
