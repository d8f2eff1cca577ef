"""Closed vocabulary, tokenizers, and thinking-text templates."""

from __future__ import annotations

import numpy as np
import pytest

from irg.rng import stream
from irg.scenelang.dsl import parse_prompt, pretty_print, random_ast
from irg.scenelang.oracle import scene_report
from irg.scenelang.render import DegradeParams, degrade, render_scene
from irg.text import (HEADERS, SPECIALS, VOCAB, plan_tokens, question_tokens,
                      reflection_tokens, tokenize_prompt, tokenize_thinking)


def test_vocab_is_closed_and_stable():
    assert len(VOCAB.tokens) == len(set(VOCAB.tokens))
    assert VOCAB.index[VOCAB.tokens[5]] == 5
    for special in SPECIALS:
        assert special in VOCAB.index


def test_encode_decode_round_trip():
    toks = ["draw", "1", "red", "circle", "."]
    ids = VOCAB.encode(toks)
    assert ids.dtype == np.int64
    assert VOCAB.decode(ids) == toks


def test_encode_rejects_unknown():
    with pytest.raises(Exception):
        VOCAB.encode(["flamingo"])


def test_tokenize_prompt_round_trip():
    for i in range(100):
        ast = random_ast(stream(51, "tp", i))
        toks = tokenize_prompt(pretty_print(ast))
        assert all(t in VOCAB.index for t in toks)
        assert parse_prompt(" ".join(toks)) == ast


def test_headers_are_atomic_tokens():
    for header in HEADERS:
        assert header in VOCAB.index
        assert tokenize_thinking(header) == [header]


def test_tokenize_thinking_greedy_headers():
    text = HEADERS[0] + " the image is blurry ."
    toks = tokenize_thinking(text)
    assert toks[0] == HEADERS[0]
    assert toks[1:] == ["the", "image", "is", "blurry", "."]


def test_tokenize_thinking_rejects_unknown():
    with pytest.raises(ValueError):
        tokenize_thinking("definitely not vocabulary")


def test_plan_tokens_cover_every_clause():
    ast = parse_prompt("2 green triangles bottom-left size 2; "
                       "1 yellow circle top-right size 3")
    toks = plan_tokens(ast)
    assert toks.count("draw") == 2
    assert "green" in toks and "yellow" in toks
    assert all(t in VOCAB.index for t in toks)
    assert tokenize_thinking(" ".join(toks)) == toks


def test_question_tokens_name_image_count():
    one = question_tokens(1)
    two = question_tokens(2)
    assert "one" in one and "image" in one
    assert "two" in two and "images" in two
    assert one != two
    for toks in (one, two):
        assert tokenize_thinking(" ".join(toks)) == toks


def test_reflection_mentions_defects_and_target():
    ast = parse_prompt("1 red circle center size 3")
    clean = render_scene(ast)
    flawed = degrade(clean, DegradeParams(), stream(52, "flaw"))
    toks = reflection_tokens(ast, scene_report(flawed, ast))
    assert toks[0] == HEADERS[0]
    assert HEADERS[1] in toks and HEADERS[2] in toks
    # the final section restates the full prompt
    tail = toks[toks.index(HEADERS[2]) + 1:]
    assert parse_prompt(" ".join(tail[:-1])) == ast
    assert tokenize_thinking(" ".join(toks)) == toks


def test_reflection_on_clean_image_says_keep():
    ast = parse_prompt("1 red circle center size 3")
    toks = reflection_tokens(ast, scene_report(render_scene(ast), ast))
    assert "unchanged" in toks
    assert "wrong" not in toks
