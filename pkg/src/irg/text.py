"""Fixed vocabulary, tokenization, and the text templates the model speaks.

The token inventory is closed: special markers, three multi-word section
headers kept atomic, punctuation, the numerals 0..24, and a small word list
covering scene prompts, drawing plans, questions, and critique texts.
Template builders return token lists directly, so no template ever depends
on string re-splitting.
"""

from __future__ import annotations

import numpy as np

from .scenelang.dsl import SceneAst, pretty_print, _tokenize
from .scenelang.oracle import SceneReport

PAD = "<pad>"
EOT = "<eot>"
MARK_PROMPT = "<prompt>"
MARK_THINK1 = "<think1>"
MARK_QUESTION = "<question>"
MARK_THINK2 = "<think2>"
ROW_SEM = "<sem>"
ROW_LAT = "<lat>"
ROW_TARGET = "<tgt>"

SPECIALS = (PAD, EOT, MARK_PROMPT, MARK_THINK1, MARK_QUESTION, MARK_THINK2,
            ROW_SEM, ROW_LAT, ROW_TARGET)

HEADER_EXPLAIN = "Detailed Explanation of Required Improvements:"
HEADER_GUIDE = "Step-by-Step Modification Guidance:"
HEADER_FINAL = "Final Comprehensive Prompt for the Improved Image:"
HEADERS = (HEADER_EXPLAIN, HEADER_GUIDE, HEADER_FINAL)

PUNCT = (";", "(", ")", ",", ".")

NUMBERS = tuple(str(i) for i in range(25))

WORDS = tuple(sorted({
    "red", "green", "blue", "yellow", "white", "black",
    "circle", "circles", "square", "squares", "triangle", "triangles",
    "top-left", "top-right", "bottom-left", "bottom-right", "center",
    "at", "size",
    "draw", "then", "with",
    "you", "have", "been", "given", "one", "two", "prompt", "and",
    "image", "images", "decide", "what", "must", "improve",
    "the", "is", "are", "wrong", "blurry", "noisy",
    "already", "matches",
    "sharpen", "all", "edges", "remove", "noise", "redraw",
    "keep", "unchanged",
}))


class Vocab:
    """Bidirectional token/id table over the closed inventory."""

    def __init__(self) -> None:
        self.tokens: tuple[str, ...] = SPECIALS + HEADERS + PUNCT + NUMBERS + WORDS
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks: list[str]) -> np.ndarray:
        try:
            return np.array([self.index[t] for t in toks], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"token not in vocabulary: {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def text(self, ids) -> str:
        return " ".join(self.decode(ids))


VOCAB = Vocab()


def tokenize_prompt(text: str) -> list[str]:
    """Split a (pre-validated) scene prompt into vocabulary tokens."""
    toks = [t for t, _ in _tokenize(text)]
    for t in toks:
        if t not in VOCAB.index:
            raise ValueError(f"prompt token not in vocabulary: {t!r}")
    return toks


def tokenize_thinking(text: str) -> list[str]:
    """Split thinking text into vocabulary tokens.

    Section headers are single multi-word tokens, so they are matched
    greedily before whitespace splitting.  Unknown tokens raise.
    """
    out: list[str] = []
    rest = text.strip()
    while rest:
        for header in HEADERS:
            if rest.startswith(header):
                out.append(header)
                rest = rest[len(header):].lstrip()
                break
        else:
            parts = rest.split(None, 1)
            out.append(parts[0])
            rest = parts[1] if len(parts) > 1 else ""
    for t in out:
        if t not in VOCAB.index:
            raise ValueError(f"thinking token not in vocabulary: {t!r}")
    return out


def _clause_phrase(clause, verb: str | None = None) -> list[str]:
    shape = clause.shape + "s" if clause.count > 1 else clause.shape
    out = [verb] if verb else []
    out += [str(clause.count), clause.color, shape,
            "at", "(", str(clause.row), ",", str(clause.col), ")",
            "with", "size", str(clause.size)]
    return out


def plan_tokens(ast: SceneAst) -> list[str]:
    """First-turn thinking: one drawing step per clause, coordinates explicit."""
    out: list[str] = []
    for i, clause in enumerate(ast.clauses):
        if i:
            out.append("then")
        out += _clause_phrase(clause, "draw")
        out.append(".")
    return out


def question_tokens(n_images: int) -> list[str]:
    """The fixed understanding question shown between turns."""
    noun = ["one", "image"] if n_images == 1 else ["two", "images"]
    return (["you", "have", "been", "given", "one", "prompt", "and"] + noun
            + [".", "decide", "what", "must", "improve", "."])


def reflection_tokens(ast: SceneAst, report: SceneReport) -> list[str]:
    """Second-turn thinking: findings, actions, then the full target prompt."""
    findings: list[str] = []
    actions: list[str] = []
    if report.sharpness_ratio < 0.9:
        findings += ["the", "image", "is", "blurry", "."]
        actions += ["sharpen", "all", "edges", "."]
    if report.noise > 0.002:
        findings += ["the", "image", "is", "noisy", "."]
        actions += ["remove", "the", "noise", "."]
    for clause, ok in zip(ast.clauses, report.clause_ok):
        if not ok:
            verb = ["are"] if clause.count > 1 else ["is"]
            findings += _clause_phrase(clause)[1:] + verb + ["wrong", "."]
            actions += _clause_phrase(clause, "redraw") + ["."]
    if not findings:
        findings = ["the", "image", "already", "matches", "the", "prompt", "."]
        actions = ["keep", "the", "image", "unchanged", "."]
    final = [t for t, _ in _tokenize(pretty_print(ast))]
    return ([HEADER_EXPLAIN] + findings + [HEADER_GUIDE] + actions
            + [HEADER_FINAL] + final + ["."])
