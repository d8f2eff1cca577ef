"""Pairwise ranking, benchmark scoring, and the pipeline comparison report.

The rank protocol shows each image pair to every judge in a random
presentation order drawn from a named stream, repeats the whole pass, and
maps verdicts back to canonical identities.  Ties are counted separately
and never enter the win rates.  All reports round their floats before
serialization so byte-identical reruns are a hard guarantee.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .inference import InferenceConfig, run_irg
from .neural.model import ModelConfig
from .rng import stream
from .scenelang.dsl import (SceneAst, is_held_out, parse_prompt, pretty_print,
                            random_ast)
from .scenelang.oracle import fidelity_score, judge_pair, semantic_score

# a judge sees (scene, first shown, second shown) and answers in
# presentation terms; the protocol undoes the shuffle
Judge = Callable[[SceneAst, np.ndarray, np.ndarray], str]

_VERDICTS = ("first", "second", "tie")


class EmptyPairs(ValueError):
    pass


def oracle_judge(criterion: str = "composite") -> Judge:
    """Deterministic scorer-backed judge; exact score ties answer 'tie'."""

    def judge(ast: SceneAst, first: np.ndarray, second: np.ndarray) -> str:
        winner, was_tie = judge_pair(first, second, ast, criterion=criterion)
        if was_tie:
            return "tie"
        return _VERDICTS[winner]

    return judge


def coin_judge(seed: int) -> Judge:
    """Ignores the images entirely; for protocol symmetry checks."""
    counter = [0]

    def judge(ast: SceneAst, first: np.ndarray, second: np.ndarray) -> str:
        g = stream(seed, "coin", counter[0])
        counter[0] += 1
        return _VERDICTS[int(g.random() < 0.5)]

    return judge


@dataclass(frozen=True)
class RankReport:
    """Win rate of canonical image B over image A, per judge and averaged."""

    per_judge: tuple[float, ...]
    average: float
    ties: tuple[int, ...]
    repeats: int
    pairs: int
    seed: int


def rank_protocol(pairs: Sequence[tuple[SceneAst, np.ndarray, np.ndarray]],
                  judges: Sequence[Judge], repeats: int = 3,
                  seed: int = 0) -> RankReport:
    """Shuffled, repeated pairwise comparison mapped back to identities."""
    if not pairs:
        raise EmptyPairs("no pairs to rank")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    wins_b = [0] * len(judges)
    wins_a = [0] * len(judges)
    ties = [0] * len(judges)
    for r in range(repeats):
        for i, (ast, img_a, img_b) in enumerate(pairs):
            flip = bool(stream(seed, "rank", r, i).random() < 0.5)
            first, second = (img_b, img_a) if flip else (img_a, img_b)
            for j, judge in enumerate(judges):
                verdict = judge(ast, first, second)
                if verdict == "tie":
                    ties[j] += 1
                    continue
                if verdict not in _VERDICTS:
                    raise ValueError(f"invalid verdict {verdict!r}")
                b_won = (verdict == "first") == flip
                if b_won:
                    wins_b[j] += 1
                else:
                    wins_a[j] += 1
    rates = tuple(
        wins_b[j] / d if (d := wins_a[j] + wins_b[j]) else 0.5
        for j in range(len(judges)))
    return RankReport(
        per_judge=tuple(round(r, 6) for r in rates),
        average=round(float(np.mean(rates)) if rates else 0.5, 6),
        ties=tuple(ties),
        repeats=repeats,
        pairs=len(pairs),
        seed=seed,
    )


def held_out_prompts(n: int, seed: int) -> list[str]:
    """Draw n distinct held-out scenes; these can never appear in training."""
    g = stream(seed, "held-out")
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        ast = random_ast(g)
        text = pretty_print(ast)
        if is_held_out(ast) and text not in seen:
            seen.add(text)
            out.append(text)
    return out


def _scene_category(ast: SceneAst) -> tuple[str, str]:
    kinds = {("named" if cl.region is not None else "coords")
             for cl in ast.clauses}
    pos = kinds.pop() if len(kinds) == 1 else "mixed"
    return f"clauses={len(ast.clauses)}", f"positions={pos}"


Generator = Callable[[str, int, int], np.ndarray]


def _default_generator(params: dict, cfg: ModelConfig,
                       icfg: InferenceConfig) -> Generator:
    def generate(prompt: str, seed: int, index: int) -> np.ndarray:
        traj, _ = run_irg(params, cfg, icfg, prompt, seed=seed,
                          labels=("bench", index))
        return traj.segments[-1].image

    return generate


def benchmark_semantic(params: dict, promptset: Sequence[str],
                       cfg: ModelConfig, seed: int,
                       icfg: InferenceConfig | None = None,
                       generate: Generator | None = None,
                       threads: int = 1) -> dict:
    """Mean prompt-match score of final images, with per-category means."""
    if not promptset:
        raise ValueError("empty promptset")
    if generate is None:
        generate = _default_generator(params, cfg,
                                      icfg if icfg is not None
                                      else InferenceConfig())

    def score_one(i: int) -> tuple[float, tuple[str, str]]:
        ast = parse_prompt(promptset[i])
        img = generate(promptset[i], seed, i)
        return semantic_score(img, ast), _scene_category(ast)

    indices = range(len(promptset))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(score_one, indices))
    else:
        scored = [score_one(i) for i in indices]

    cats: dict[str, list[float]] = {}
    for value, names in scored:
        for name in names:
            cats.setdefault(name, []).append(value)
    return {
        "mean": round(float(np.mean([v for v, _ in scored])), 6),
        "n": len(promptset),
        "seed": seed,
        "categories": {name: {"mean": round(float(np.mean(vals)), 6),
                              "n": len(vals)}
                       for name, vals in sorted(cats.items())},
    }


@dataclass(frozen=True)
class CompareReport:
    """Scores for each sampling pipeline plus the final-vs-step-1 rank."""

    variants: dict[str, dict[str, float]]
    rank_final_over_step1: RankReport
    n_prompts: int
    seed: int

    def to_json(self) -> str:
        body = {
            "variants": self.variants,
            "rank_final_over_step1": {
                "per_judge": list(self.rank_final_over_step1.per_judge),
                "average": self.rank_final_over_step1.average,
                "ties": list(self.rank_final_over_step1.ties),
                "repeats": self.rank_final_over_step1.repeats,
                "pairs": self.rank_final_over_step1.pairs,
                "seed": self.rank_final_over_step1.seed,
            },
            "n_prompts": self.n_prompts,
            "seed": self.seed,
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [
            f"pipeline comparison over {self.n_prompts} prompts "
            f"(seed {self.seed})",
            "",
            f"{'variant':<22}{'semantic':>10}{'fidelity':>10}",
        ]
        for name in ("no-thinking", "self-cot", "step1", "final"):
            row = self.variants[name]
            lines.append(f"{name:<22}{row['semantic']:>10.4f}"
                         f"{row['fidelity']:>10.4f}")
        r = self.rank_final_over_step1
        lines += [
            "",
            f"final preferred over step 1: {r.average:.4f} "
            f"(ties {sum(r.ties)}, {r.repeats} repeats, {r.pairs} pairs)",
        ]
        return "\n".join(lines) + "\n"


def compare_pipelines(params: dict, promptset: Sequence[str],
                      cfg: ModelConfig, seed: int,
                      icfg: InferenceConfig | None = None,
                      repeats: int = 3, threads: int = 1) -> CompareReport:
    """Score four sampling pipelines from one checkpoint on shared seeds.

    The single-turn variant and the two-turn run's first image come from
    the same code path with the same streams, so they coincide exactly;
    both rows are kept so the report shape matches the two-turn story.
    """
    if not promptset:
        raise ValueError("empty promptset")
    icfg = icfg if icfg is not None else InferenceConfig()

    def run_one(i: int) -> dict:
        prompt = promptset[i]
        ast = parse_prompt(prompt)
        _, traces = run_irg(params, cfg, icfg, prompt, seed=seed,
                            labels=("cmp", i))
        step1_img, final_img = traces[0].image, traces[-1].image
        bare, _ = run_irg(params, cfg, icfg, prompt, seed=seed,
                          labels=("cmp", i), with_thinking=False)
        bare_img = bare.segments[-1].image
        return {
            "ast": ast,
            "images": {"no-thinking": bare_img, "self-cot": step1_img,
                       "step1": step1_img, "final": final_img},
        }

    indices = range(len(promptset))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(run_one, indices))
    else:
        runs = [run_one(i) for i in indices]

    variants: dict[str, dict[str, float]] = {}
    for name in ("no-thinking", "self-cot", "step1", "final"):
        sems = [semantic_score(r["images"][name], r["ast"]) for r in runs]
        fids = [fidelity_score(r["images"][name], r["ast"]) for r in runs]
        variants[name] = {"semantic": round(float(np.mean(sems)), 6),
                          "fidelity": round(float(np.mean(fids)), 6)}
    rank = rank_protocol(
        [(r["ast"], r["images"]["step1"], r["images"]["final"])
         for r in runs],
        judges=[oracle_judge()], repeats=repeats, seed=seed)
    return CompareReport(variants=variants, rank_final_over_step1=rank,
                         n_prompts=len(promptset), seed=seed)
