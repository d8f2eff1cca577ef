"""Command-line entry point wiring forge, train, infer, eval, compare, render.

Every run writes a manifest holding the fully resolved settings, a hash of
them, and library versions, so the run can be repeated from the manifest
alone.  Exit codes: 0 success, 1 usage or config error, 2 runtime error.
Seed precedence: ``--seed`` flag, then the ``IRG_SEED`` environment
variable, then the config file, then 0.
"""

import os

# Must happen before numpy is first imported anywhere in the process, so
# linear algebra results never depend on the host's core count.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import dataclasses
import hashlib
import json
import platform
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

_WIDTH = 78


class ConfigError(Exception):
    """Bad content in a config file or environment override."""


class UsageError(Exception):
    """Flag combination that argparse alone cannot reject."""


class _Parser(argparse.ArgumentParser):
    """Parser whose usage errors exit 1; 2 is reserved for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _fmt(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, width=_WIDTH)


# --------------------------------------------------------------------------
# config files


def _load_toml(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _load_config(path: str | None) -> dict:
    """Load the shared experiment config and reject typos in every section."""
    if not path:
        return {}
    from .inference import InferenceConfig
    from .neural.model import ModelConfig
    from .training import TrainConfig

    table = _load_toml(path)
    _check_keys(table, {"seed", "model", "train", "infer"}, Path(path).name)
    sections = (
        ("model", _field_names(ModelConfig)),
        ("train", _field_names(TrainConfig) - {"seed"}),
        ("infer", _field_names(InferenceConfig)),
    )
    for name, allowed in sections:
        if name in table:
            _check_keys(table[name], allowed, f"[{name}]")
    return table


def _model_config(table: dict):
    from .neural.model import ModelConfig

    return ModelConfig(**{k: int(v) for k, v in table.items()})


def _train_config(table: dict, seed: int):
    from .modes import Mode
    from .training import TrainConfig

    ints = {"batch_size", "stage1_steps", "stage2_steps", "warmup_steps",
            "trace_every"}
    kwargs = {}
    for key, value in table.items():
        if key == "mode_weights":
            valid = {m.value for m in Mode}
            bad = sorted(set(value) - valid)
            if bad:
                raise ConfigError(f"unknown task {bad[0]!r} in mode_weights")
            kwargs[key] = {k: float(v) for k, v in value.items()}
        elif key in ints:
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return TrainConfig(seed=seed, **kwargs)


def _infer_config(table: dict):
    from .inference import InferenceConfig

    ints = {"sampler_steps", "max_think_tokens"}
    kwargs = {k: (int(v) if k in ints else float(v))
              for k, v in table.items()}
    return InferenceConfig(**kwargs)


def _resolve_seed(flag: int | None, file_value, fallback: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("IRG_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(
                f"IRG_SEED must be an integer, got {env!r}") from None
    if file_value is not None:
        return int(file_value)
    return fallback


# --------------------------------------------------------------------------
# run manifests


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(blob.encode("utf-8"), digest_size=8).hexdigest()


def _write_manifest(path: Path, subcommand: str, config: dict) -> None:
    """Record the resolved settings that determine this run's outputs."""
    import numpy as np

    from . import __version__

    manifest = {
        "subcommand": subcommand,
        "config": config,
        "config_hash": _config_hash(config),
        "versions": {"python": platform.python_version(),
                     "numpy": np.__version__,
                     "irg": __version__},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


# --------------------------------------------------------------------------
# shared helpers


def _load_weights(ckpt: str, which: str):
    from .training import load_checkpoint, model_config_from_meta

    params, _, ema, meta = load_checkpoint(ckpt)
    weights = ema if which == "ema" and ema else params
    return weights, model_config_from_meta(meta)


def _prompt_set(args, seed: int) -> list:
    from .evalrank import held_out_prompts

    if args.prompts:
        lines = Path(args.prompts).read_text(encoding="utf-8").splitlines()
        prompts = [ln.strip() for ln in lines if ln.strip()]
        if not prompts:
            raise ValueError(f"no prompts in {args.prompts}")
        return prompts
    return held_out_prompts(args.n_prompts, seed)


def _prompt_source(args) -> dict:
    if args.prompts:
        return {"prompts_file": args.prompts}
    return {"n_prompts": args.n_prompts}


# --------------------------------------------------------------------------
# subcommands


def _cmd_forge(args) -> int:
    from dataclasses import asdict

    from .forge import DEFAULT_COUNTS, ForgeSpec, HttpClient, build_dataset
    from .scenelang.render import DegradeParams

    table = _load_toml(args.spec) if args.spec else {}
    _check_keys(table, {"seed", "out_dir", "bootstrap_checkpoint", "counts",
                        "degrade", "http"}, "forge spec")
    counts = dict(DEFAULT_COUNTS)
    sub = table.get("counts", {})
    _check_keys(sub, set(DEFAULT_COUNTS), "[counts]")
    counts.update({k: int(v) for k, v in sub.items()})
    dtab = table.get("degrade", {})
    _check_keys(dtab, _field_names(DegradeParams), "[degrade]")
    degrade = DegradeParams(**{k: (int(v) if k in ("blur_radius", "jitter")
                                   else float(v))
                               for k, v in dtab.items()})
    seed = _resolve_seed(args.seed, table.get("seed"))
    out_dir = args.out or table.get("out_dir") or "dataset"
    bootstrap = table.get("bootstrap_checkpoint") or None
    spec = ForgeSpec(counts=counts, degrade=degrade, seed=seed,
                     out_dir=out_dir, bootstrap_checkpoint=bootstrap)

    client = None
    http = None
    if "http" in table:
        http = dict(table["http"])
        _check_keys(http, {"base_url", "timeout", "retries", "backoff"},
                    "[http]")
        client = HttpClient(http["base_url"],
                            timeout=float(http.get("timeout", 10.0)),
                            retries=int(http.get("retries", 3)),
                            backoff=float(http.get("backoff", 0.5)))

    summary = build_dataset(spec, client=client, threads=args.threads)
    config = {"seed": seed, "out_dir": str(out_dir), "counts": counts,
              "degrade": asdict(degrade), "bootstrap_checkpoint": bootstrap,
              "http": http}
    _write_manifest(Path(out_dir) / "run-manifest.json", "forge", config)
    n = sum(counts.values())
    print(f"forged {n} samples into {out_dir} "
          f"(checksum {summary['dataset_checksum']})")
    return 0


def _cmd_train(args) -> int:
    from dataclasses import asdict

    from .forge import load_dataset
    from .training import save_checkpoint, train, write_trace

    if args.stage == "2" and not args.resume:
        raise UsageError("--stage 2 needs --resume with a stage-1 checkpoint")
    table = _load_config(args.config)
    seed = _resolve_seed(args.seed, table.get("seed"))
    mcfg = _model_config(table.get("model", {}))
    tcfg = _train_config(table.get("train", {}), seed)

    records = load_dataset(args.data)
    stop = 0 if args.stage == "1" else None
    result = train(records, tcfg, mcfg, resume=args.resume,
                   log_every=args.log_every, stop_after_stage=stop)
    stage_index = 1 if args.stage == "1" else 2
    save_checkpoint(args.out, result.params, result.adam, mcfg,
                    ema=result.ema, stage_index=stage_index, next_step=0)
    if args.trace:
        write_trace(args.trace, result.trace)

    config = {"data": args.data, "stage": args.stage, "resume": args.resume,
              "model": asdict(mcfg), "train": asdict(tcfg)}
    _write_manifest(Path(str(args.out) + ".manifest.json"), "train", config)
    print(f"saved checkpoint to {args.out} (stage {args.stage}, "
          f"{len(result.trace)} steps this run)")
    return 0


def _cmd_infer(args) -> int:
    from dataclasses import asdict

    from .inference import run_irg
    from .scenelang.render import write_ppm
    from .text import VOCAB
    from .trajectory import TEXT_ROLES, SegmentRole, save_trajectory

    table = _load_config(args.config)
    seed = _resolve_seed(args.seed, table.get("seed"))
    icfg = _infer_config(table.get("infer", {}))
    weights, mcfg = _load_weights(args.ckpt, args.weights)

    traj, traces = run_irg(weights, mcfg, icfg, args.prompt, seed,
                           rounds=args.rounds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectory(traj, out / "trajectory.bin")
    for i, trace in enumerate(traces, start=1):
        write_ppm(out / f"step-{i}.ppm", trace.image)
    thinking = [
        " ".join(VOCAB.decode(seg.tokens))
        for seg in traj.segments
        if seg.role in TEXT_ROLES and seg.role is not SegmentRole.PROMPT
    ]
    (out / "thinking.txt").write_text("\n".join(thinking) + "\n",
                                     encoding="utf-8")

    config = {"ckpt": args.ckpt, "prompt": args.prompt, "seed": seed,
              "rounds": args.rounds, "weights": args.weights,
              "infer": asdict(icfg)}
    _write_manifest(out / "run-manifest.json", "infer", config)
    print(f"wrote {len(traces)} images and the trajectory to {out}")
    return 0


def _cmd_eval(args) -> int:
    from dataclasses import asdict

    from .evalrank import benchmark_semantic

    table = _load_config(args.config)
    seed = _resolve_seed(args.seed, table.get("seed"))
    icfg = _infer_config(table.get("infer", {}))
    weights, mcfg = _load_weights(args.ckpt, args.weights)
    prompts = _prompt_set(args, seed)

    report = benchmark_semantic(weights, prompts, mcfg, seed, icfg=icfg,
                                threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    lines = [f"semantic benchmark over {report['n']} prompts "
             f"(seed {report['seed']})",
             "",
             f"{'mean':<26}{report['mean']:>10.6f}"]
    for name, stats in report["categories"].items():
        lines.append(f"{name:<26}{stats['mean']:>10.6f}  n={stats['n']}")
    (out / "eval.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    config = {"ckpt": args.ckpt, "seed": seed, "weights": args.weights,
              "infer": asdict(icfg), **_prompt_source(args)}
    _write_manifest(out / "run-manifest.json", "eval", config)
    print(f"semantic mean {report['mean']:.6f} over {report['n']} prompts")
    return 0


def _cmd_compare(args) -> int:
    from dataclasses import asdict

    from .evalrank import compare_pipelines

    table = _load_config(args.config)
    seed = _resolve_seed(args.seed, table.get("seed"))
    icfg = _infer_config(table.get("infer", {}))
    weights, mcfg = _load_weights(args.ckpt, args.weights)
    prompts = _prompt_set(args, seed)

    report = compare_pipelines(weights, prompts, mcfg, seed, icfg=icfg,
                               repeats=args.repeats, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(report.to_json(), encoding="utf-8")
    (out / "compare.txt").write_text(report.to_text(), encoding="utf-8")

    config = {"ckpt": args.ckpt, "seed": seed, "weights": args.weights,
              "repeats": args.repeats, "infer": asdict(icfg),
              **_prompt_source(args)}
    _write_manifest(out / "run-manifest.json", "compare", config)
    print(f"final beats step 1 in "
          f"{report.rank_final_over_step1.average:.6f} of decided pairs "
          f"({report.n_prompts} prompts)")
    return 0


def _cmd_render(args) -> int:
    from .scenelang.dsl import parse_prompt
    from .scenelang.render import render_scene, write_ppm

    ast = parse_prompt(args.prompt)
    write_ppm(args.out, render_scene(ast))
    _write_manifest(Path(str(args.out) + ".manifest.json"), "render",
                    {"prompt": args.prompt, "out": str(args.out)})
    print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(
        prog="irg",
        description="Train and run an interleaved text-and-image generator "
                    "on the synthetic scene micro-domain.",
        formatter_class=_fmt)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser, metavar="command")

    p = sub.add_parser(
        "forge", formatter_class=_fmt,
        help="build the six-task training dataset",
        description="Build the training dataset: rendered scenes, degraded "
                    "counterparts, and templated thinking text for all six "
                    "tasks.")
    p.add_argument("--spec", metavar="TOML",
                   help="forge spec file (counts, degrade, seed, http)")
    p.add_argument("--out", metavar="DIR",
                   help="dataset directory (overrides the spec)")
    p.add_argument("--seed", type=int, metavar="N", help="override the seed")
    p.add_argument("--threads", type=int, default=1, metavar="N",
                   help="worker threads (default 1)")
    p.set_defaults(func=_cmd_forge)

    p = sub.add_parser(
        "train", formatter_class=_fmt,
        help="train the model on a forged dataset",
        description="Train on a forged dataset: a decomposed-task stage "
                    "followed by a full-trajectory stage.")
    p.add_argument("--data", required=True, metavar="DIR",
                   help="forged dataset directory")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="checkpoint file to write")
    p.add_argument("--config", metavar="TOML",
                   help="config file with [model] and [train] tables")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all",
                   help="which training stage to run (default all)")
    p.add_argument("--resume", metavar="FILE",
                   help="checkpoint to continue from")
    p.add_argument("--seed", type=int, metavar="N", help="override the seed")
    p.add_argument("--log-every", type=int, default=0, metavar="N",
                   help="print a progress line every N steps (0 = quiet)")
    p.add_argument("--trace", metavar="CSV",
                   help="also write a per-step loss trace")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser(
        "infer", formatter_class=_fmt,
        help="sample a full trajectory for one prompt",
        description="Sample think, draw, reflect, redraw for one prompt and "
                    "write the trajectory, the step images, and the thinking "
                    "text.")
    p.add_argument("--ckpt", required=True, metavar="FILE",
                   help="trained checkpoint")
    p.add_argument("--prompt", required=True, metavar="TEXT",
                   help="scene prompt")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="output directory")
    p.add_argument("--config", metavar="TOML",
                   help="config file with an [infer] table")
    p.add_argument("--seed", type=int, metavar="N", help="override the seed")
    p.add_argument("--rounds", type=int, default=1, metavar="N",
                   help="improvement rounds after the first image (default 1)")
    p.add_argument("--weights", choices=("ema", "raw"), default="ema",
                   help="use averaged or raw weights (default ema)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser(
        "eval", formatter_class=_fmt,
        help="score final images against their prompts",
        description="Score the final image of each prompt with the scene "
                    "oracle and report per-category means.")
    _eval_like_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "compare", formatter_class=_fmt,
        help="compare sampling pipelines on held-out prompts",
        description="Score no-thinking, single-turn, and two-turn sampling "
                    "from one checkpoint and rank the final image against "
                    "the first.")
    _eval_like_flags(p)
    p.add_argument("--repeats", type=int, default=3, metavar="N",
                   help="rank-protocol repeats (default 3)")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser(
        "render", formatter_class=_fmt,
        help="render a prompt with the reference renderer",
        description="Parse a scene prompt and render it directly, bypassing "
                    "the model.")
    p.add_argument("--prompt", required=True, metavar="TEXT",
                   help="scene prompt")
    p.add_argument("--out", required=True, metavar="FILE",
                   help="PPM file to write")
    p.set_defaults(func=_cmd_render)

    return parser


def _eval_like_flags(p) -> None:
    p.add_argument("--ckpt", required=True, metavar="FILE",
                   help="trained checkpoint")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="output directory")
    p.add_argument("--config", metavar="TOML",
                   help="config file with an [infer] table")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--prompts", metavar="FILE",
                       help="prompt file, one per line")
    group.add_argument("--n-prompts", type=int, default=200, metavar="N",
                       help="number of held-out prompts (default 200)")
    p.add_argument("--seed", type=int, metavar="N", help="override the seed")
    p.add_argument("--threads", type=int, default=1, metavar="N",
                   help="worker threads (default 1)")
    p.add_argument("--weights", choices=("ema", "raw"), default="ema",
                   help="use averaged or raw weights (default ema)")


def main(argv: list | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"irg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # CLI boundary: everything becomes one line
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"irg {args.command}: {type(exc).__name__}: {message}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
