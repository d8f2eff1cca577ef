"""Scene prompt DSL: parsing, canonical printing, and random scene sampling.

Grammar::

    prompt := clause (";" clause)*
    clause := count? color shape ("at" "(" int "," int ")" | region)? ("size" int)?

Defaults: count 1, position center, size 3.  Positions are (row, col) on a
G x G canvas.  Region names resolve to fixed canonical coordinates.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

GRID = 24

COLORS = ("red", "green", "blue", "yellow", "white", "black")
SHAPES = ("circle", "square", "triangle")
REGIONS = ("top-left", "top-right", "bottom-left", "bottom-right", "center")

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}

_PLURAL = {s + "s": s for s in SHAPES}


def region_coords(region: str, grid: int = GRID) -> tuple[int, int]:
    q, h = grid // 4, grid // 2
    return {
        "top-left": (q, q),
        "top-right": (q, grid - q),
        "bottom-left": (grid - q, q),
        "bottom-right": (grid - q, grid - q),
        "center": (h, h),
    }[region]


class ParseError(ValueError):
    """Prompt rejected; carries the byte offset and what was expected."""

    def __init__(self, position: int, expected: str):
        self.position = position
        self.expected = expected
        super().__init__(f"parse error at byte {position}: expected {expected}")


@dataclass(frozen=True)
class Clause:
    count: int
    shape: str
    color: str
    row: int
    col: int
    size: int
    region: str | None = None  # set when the position was given as a region name

    def object_centers(self) -> list[tuple[int, int]]:
        """Centers of the clause's objects, laid out in a non-overlapping row."""
        step = 2 * self.size + 2
        return [
            (self.row, self.col + round((i - (self.count - 1) / 2) * step))
            for i in range(self.count)
        ]

    def bounding_box(self) -> tuple[int, int, int, int]:
        """(row0, col0, row1, col1) inclusive box covering every object."""
        centers = self.object_centers()
        s = self.size
        return (
            self.row - s,
            min(c for _, c in centers) - s,
            self.row + s,
            max(c for _, c in centers) + s,
        )


@dataclass(frozen=True)
class SceneAst:
    clauses: tuple[Clause, ...]
    background: str = "black"


def _tokenize(text: str) -> list[tuple[str, int]]:
    """Split into (token, byte offset) pairs; punctuation is its own token."""
    toks: list[tuple[str, int]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in ";(),":
            toks.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in ";(),":
                j += 1
            toks.append((text[i:j], i))
            i = j
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.pos = 0

    def _peek(self) -> str | None:
        return self.toks[self.pos][0] if self.pos < len(self.toks) else None

    def _offset(self) -> int:
        if self.pos < len(self.toks):
            return self.toks[self.pos][1]
        return len(self.text)

    def _take(self) -> str:
        tok = self.toks[self.pos][0]
        self.pos += 1
        return tok

    def _expect(self, literal: str) -> None:
        if self._peek() != literal:
            raise ParseError(self._offset(), f"'{literal}'")
        self._take()

    def _int(self, what: str) -> int:
        tok = self._peek()
        if tok is None or not tok.isdigit():
            raise ParseError(self._offset(), what)
        self._take()
        return int(tok)

    def parse(self, grid: int) -> SceneAst:
        if not self.toks:
            raise ParseError(0, "clause")
        clauses = [self._clause(grid)]
        while self._peek() == ";":
            self._take()
            clauses.append(self._clause(grid))
        if self.pos != len(self.toks):
            raise ParseError(self._offset(), "';' or end of prompt")
        if len(clauses) > 4:
            raise ParseError(0, "at most 4 clauses")
        return SceneAst(clauses=tuple(clauses))

    def _clause(self, grid: int) -> Clause:
        start = self._offset()
        count = 1
        tok = self._peek()
        if tok is not None and tok.isdigit():
            off = self._offset()
            count = self._int("count")
            if not 1 <= count <= 3:
                raise ParseError(off, "count in 1..3")
            tok = self._peek()
        if tok not in COLORS:
            raise ParseError(self._offset(), "color")
        color = self._take()
        tok = self._peek()
        shape = _PLURAL.get(tok, tok)
        if shape not in SHAPES:
            raise ParseError(self._offset(), "shape")
        self._take()

        region: str | None = None
        tok = self._peek()
        if tok == "at":
            self._take()
            self._expect("(")
            off = self._offset()
            row = self._int("row")
            self._expect(",")
            off_c = self._offset()
            col = self._int("col")
            self._expect(")")
            if not (0 <= row <= grid):
                raise ParseError(off, f"row in 0..{grid}")
            if not (0 <= col <= grid):
                raise ParseError(off_c, f"col in 0..{grid}")
        elif tok in REGIONS:
            region = self._take()
            row, col = region_coords(region, grid)
        else:
            region = "center"
            row, col = region_coords("center", grid)

        size = 3
        if self._peek() == "size":
            self._take()
            off = self._offset()
            size = self._int("size")
            if not 2 <= size <= grid // 3:
                raise ParseError(off, f"size in 2..{grid // 3}")

        clause = Clause(count=count, shape=shape, color=color, row=row, col=col,
                        size=size, region=region)
        r0, c0, r1, c1 = clause.bounding_box()
        if r0 < 0 or c0 < 0 or r1 > grid - 1 or c1 > grid - 1:
            raise ParseError(start, "clause objects inside canvas")
        return clause


def parse_prompt(text: str, grid: int = GRID) -> SceneAst:
    """Parse a prompt string; raise :class:`ParseError` on any rejection."""
    if not isinstance(text, str):
        raise ParseError(0, "text")
    return _Parser(text).parse(grid)


def pretty_print(ast: SceneAst) -> str:
    """Canonical form: every default made explicit, clauses joined by '; '."""
    parts = []
    for cl in ast.clauses:
        shape = cl.shape + "s" if cl.count > 1 else cl.shape
        pos = cl.region if cl.region is not None else f"at ({cl.row},{cl.col})"
        parts.append(f"{cl.count} {cl.color} {shape} {pos} size {cl.size}")
    return "; ".join(parts)


def ast_hash(ast: SceneAst) -> int:
    """Stable 64-bit hash of the canonical form (never Python's salted hash)."""
    digest = hashlib.blake2b(pretty_print(ast).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def is_held_out(ast: SceneAst) -> bool:
    """Evaluation-only scenes: canonical hash in the reserved residue class."""
    return ast_hash(ast) % 10 == 0


def _boxes_clash(a: tuple[int, int, int, int], b: tuple[int, int, int, int],
                 margin: int = 1) -> bool:
    return not (a[2] + margin < b[0] or b[2] + margin < a[0]
                or a[3] + margin < b[1] or b[3] + margin < a[1])


def _try_clause(rng: np.random.Generator, grid: int,
                taken: list[tuple[int, int, int, int]]) -> Clause | None:
    count = int(rng.choice([1, 1, 1, 2, 2, 3]))
    shape = str(rng.choice(SHAPES))
    color = str(rng.choice([c for c in COLORS if c != "black"]))
    size = int(rng.choice([2, 2, 3, 3, 4, 5] if count == 1 else [2, 2, 3]))
    if rng.random() < 0.4:
        region = str(rng.choice(REGIONS))
        row, col = region_coords(region, grid)
    else:
        region = None
        half_w = size + (count - 1) * (size + 1)
        if half_w > grid // 2 - 1:
            return None
        row = int(rng.integers(size, grid - size))
        col = int(rng.integers(half_w, grid - half_w))
    clause = Clause(count=count, shape=shape, color=color, row=row, col=col,
                    size=size, region=region)
    box = clause.bounding_box()
    if box[0] < 0 or box[1] < 0 or box[2] > grid - 1 or box[3] > grid - 1:
        return None
    if any(_boxes_clash(box, t) for t in taken):
        return None
    return clause


def random_ast(rng: np.random.Generator, grid: int = GRID) -> SceneAst:
    """Draw a valid scene; clause boxes never overlap across clauses."""
    n_clauses = int(rng.choice([1, 1, 2, 2, 3]))
    clauses: list[Clause] = []
    taken: list[tuple[int, int, int, int]] = []
    for _ in range(n_clauses):
        for _attempt in range(40):
            cl = _try_clause(rng, grid, taken)
            if cl is not None:
                clauses.append(cl)
                taken.append(cl.bounding_box())
                break
    if not clauses:  # cannot happen on an empty canvas, but stay total
        clauses = [Clause(1, "circle", "red", grid // 2, grid // 2, 3, "center")]
    return SceneAst(clauses=tuple(clauses))


def variant_ast(ast: SceneAst, rng: np.random.Generator,
                grid: int = GRID) -> SceneAst:
    """Complexity fan-out: permute clause order or append one more clause."""
    if len(ast.clauses) > 1 and rng.random() < 0.5:
        order = rng.permutation(len(ast.clauses))
        if all(int(i) == k for k, i in enumerate(order)):
            order = np.roll(order, 1)
        return replace(ast, clauses=tuple(ast.clauses[int(i)] for i in order))
    taken = [cl.bounding_box() for cl in ast.clauses]
    for _attempt in range(40):
        cl = _try_clause(rng, grid, taken)
        if cl is not None and len(ast.clauses) < 4:
            return replace(ast, clauses=ast.clauses + (cl,))
    return replace(ast, clauses=tuple(reversed(ast.clauses)))
