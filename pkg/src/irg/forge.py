"""Dataset construction for the six training tasks.

A build draws scene programs, renders each one clean, corrupts a copy into
a plausible first draft, and freezes the planning and reflection texts.
Drawing the scene list is a single sequential pass (it needs global
knowledge for dedup); everything per sample afterwards runs from a stream
keyed by (seed, task, index), so builds are bit-identical across runs and
across worker counts.

Image and text generation go through a small client interface.  The
default client is backed by the local renderer, templates, and oracle; an
HTTP client with the same surface lets real generation and judging
services stand in without touching the build logic.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import requests

from .modes import Mode, ModeRecord
from .neural.encoders import group_latent, pool_image
from .rng import stream
from .scenelang.dsl import (SceneAst, ast_hash, is_held_out, parse_prompt,
                            pretty_print, random_ast, variant_ast)
from .scenelang.oracle import fidelity_score, judge_pair, scene_report
from .scenelang.render import (DegradeParams, degrade, ppm_bytes,
                               ppm_from_bytes, quantize_colors, render_scene)
from .text import (plan_tokens, reflection_tokens, tokenize_prompt,
                   tokenize_thinking)
from .trajectory import raster_hash

MODE_ORDER = tuple(Mode)

DEFAULT_COUNTS: dict[str, int] = {
    Mode.INITIAL_CRITIQUE.value: 500,
    Mode.INITIAL_THINK.value: 500,
    Mode.REFLECT_CRITIQUE.value: 500,
    Mode.REFLECT_THINK.value: 500,
    Mode.INITIAL_FULL.value: 500,
    Mode.IMPROVE_FULL.value: 300,
}


class ForgeError(Exception):
    """Base for everything this module raises on purpose."""


class InvalidSpec(ForgeError):
    pass


class TransportError(ForgeError):
    def __init__(self, code: int, message: str):
        super().__init__(f"HTTP {code}: {message}")
        self.code = code


class ClientTimeout(ForgeError):
    def __init__(self, attempts: list[str]):
        super().__init__("; ".join(attempts))
        self.attempts = attempts


class BadResponse(ForgeError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ForgeSpec:
    """Everything that determines a dataset build."""

    counts: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    degrade: DegradeParams = field(default_factory=DegradeParams)
    seed: int = 0
    out_dir: str | Path = "dataset"
    bootstrap_checkpoint: str | None = None  # first drafts from a model run

    def validate(self) -> None:
        known = {m.value for m in Mode}
        unknown = set(self.counts) - known
        if unknown:
            raise InvalidSpec(f"unknown task names: {sorted(unknown)}")
        missing = known - set(self.counts)
        if missing:
            raise InvalidSpec(f"missing task counts: {sorted(missing)}")
        bad = {k: v for k, v in self.counts.items() if int(v) < 1}
        if bad:
            raise InvalidSpec(f"counts must be >= 1, got {bad}")


class ExternalClient(Protocol):
    """Pluggable generation and judging services.

    Implementations must be deterministic for a declared seed, or say
    otherwise in ``describe()`` so the build manifest can record it.
    """

    def generate_image(self, prompt: str) -> np.ndarray: ...

    def generate_thinking(self, prompt: str, images: Sequence[np.ndarray],
                          template: str) -> str: ...

    def judge(self, prompt: str, image_a: np.ndarray,
              image_b: np.ndarray) -> str: ...

    def describe(self) -> dict: ...


class MockClient:
    """Local stand-in: renderer for images, templates for text, oracle judge."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate_image(self, prompt: str) -> np.ndarray:
        return render_scene(parse_prompt(prompt))

    def generate_thinking(self, prompt: str, images: Sequence[np.ndarray],
                          template: str) -> str:
        ast = parse_prompt(prompt)
        if template == "initial":
            return " ".join(plan_tokens(ast))
        if template == "improving":
            if not images:
                raise ValueError("improving template needs the draft image")
            report = scene_report(np.asarray(images[0]), ast)
            return " ".join(reflection_tokens(ast, report))
        raise ValueError(f"unknown template: {template!r}")

    def judge(self, prompt: str, image_a: np.ndarray,
              image_b: np.ndarray) -> str:
        winner, _ = judge_pair(image_a, image_b, parse_prompt(prompt),
                               seed=self.seed)
        return "ab"[winner]

    def describe(self) -> dict:
        return {"kind": "mock", "seed": self.seed, "deterministic": True}


def mock_client(seed: int = 0) -> MockClient:
    return MockClient(seed)


def _encode_image(img: np.ndarray) -> dict:
    return {"format": "ppm",
            "data": base64.b64encode(ppm_bytes(img)).decode("ascii")}


def _decode_image(payload: object, path: str) -> np.ndarray:
    if not isinstance(payload, dict):
        raise BadResponse(path, "expected an object")
    fmt = payload.get("format")
    data = payload.get("data")
    if fmt is None:
        raise BadResponse(f"{path}.format", "missing")
    if data is None:
        raise BadResponse(f"{path}.data", "missing")
    raw = base64.b64decode(data)
    if fmt == "ppm":
        return ppm_from_bytes(raw)
    if fmt == "png":
        try:
            from io import BytesIO

            from PIL import Image
        except ImportError as exc:
            raise BadResponse(f"{path}.format",
                              "png payloads need pillow installed") from exc
        arr = np.asarray(Image.open(BytesIO(raw)).convert("RGB"))
        return arr.astype(np.float32) / 255.0
    raise BadResponse(f"{path}.format", f"unsupported format {fmt!r}")


class HttpClient:
    """JSON-over-HTTP client; idempotent calls retry with backoff."""

    def __init__(self, base_url: str, timeout: float = 10.0,
                 retries: int = 3, backoff: float = 0.5):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _post(self, endpoint: str, body: dict) -> dict:
        attempts: list[str] = []
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.base_url + endpoint, json=body,
                                     timeout=self.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                attempts.append(f"attempt {attempt + 1}: {exc}")
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
                continue
            if resp.status_code != 200:
                raise TransportError(resp.status_code, resp.reason)
            try:
                return resp.json()
            except ValueError as exc:
                raise BadResponse("$", f"invalid JSON: {exc}") from exc
        raise ClientTimeout(attempts)

    def generate_image(self, prompt: str) -> np.ndarray:
        resp = self._post("/generate_image", {"prompt": prompt})
        if "image" not in resp:
            raise BadResponse("image", "missing")
        return _decode_image(resp["image"], "image")

    def generate_thinking(self, prompt: str, images: Sequence[np.ndarray],
                          template: str) -> str:
        resp = self._post("/generate_thinking", {
            "prompt": prompt,
            "images": [_encode_image(np.asarray(i)) for i in images],
            "template": template,
        })
        if "text" not in resp:
            raise BadResponse("text", "missing")
        return str(resp["text"])

    def judge(self, prompt: str, image_a: np.ndarray,
              image_b: np.ndarray) -> str:
        resp = self._post("/judge", {
            "prompt": prompt,
            "image_a": _encode_image(image_a),
            "image_b": _encode_image(image_b),
        })
        winner = resp.get("winner")
        if winner not in ("a", "b"):
            raise BadResponse("winner", f"expected 'a' or 'b', got {winner!r}")
        return winner

    def describe(self) -> dict:
        return {"kind": "http", "base_url": self.base_url,
                "deterministic": False}


def http_client(base_url: str, timeout: float = 10.0,
                retries: int = 3) -> HttpClient:
    return HttpClient(base_url, timeout=timeout, retries=retries)


def draw_worklist(spec: ForgeSpec) -> dict[Mode, list[dict]]:
    """Sequentially choose every scene for every task.

    Dedup is exact on the canonical form across the whole dataset, and
    scenes in the held-out residue class are never used.  Each base scene
    fans out into one or two harder or reordered variants while its
    task still needs samples.
    """
    g = stream(spec.seed, "ast")
    seen: set[int] = set()
    work: dict[Mode, list[dict]] = {m: [] for m in MODE_ORDER}

    def admit(ast: SceneAst) -> bool:
        h = ast_hash(ast)
        if is_held_out(ast) or h in seen:
            return False
        seen.add(h)
        return True

    for mode in MODE_ORDER:
        want = int(spec.counts[mode.value])
        rows = work[mode]
        while len(rows) < want:
            base = random_ast(g)
            if not admit(base):
                continue
            rows.append({"ast": base, "variant": False})
            n_variants = 1 + int(g.random() < 0.5)
            for _ in range(n_variants):
                if len(rows) >= want:
                    break
                var = variant_ast(base, g)
                if admit(var):
                    rows.append({"ast": var, "variant": True})
        for index, row in enumerate(rows):
            row["index"] = index
    return work


def _bootstrap_draft(ckpt_path: str, prompt: str, seed: int,
                     labels: tuple) -> np.ndarray:
    """First draft sampled from a trained checkpoint instead of degradation."""
    from .inference import InferenceConfig, run_irg
    from .training import load_checkpoint, model_config_from_meta

    params, _, ema, meta = load_checkpoint(ckpt_path)
    traj, _ = run_irg(ema or params, model_config_from_meta(meta),
                      InferenceConfig(), prompt, seed=seed, labels=labels,
                      rounds=0)
    return traj.segments[-1].image


def build_sample(spec: ForgeSpec, mode: Mode, index: int, ast: SceneAst,
                 variant: bool, client: ExternalClient) -> dict:
    """Produce one manifest row plus its two quantized images."""
    prompt = pretty_print(ast)
    clean = quantize_colors(client.generate_image(prompt))
    if spec.bootstrap_checkpoint is not None:
        flawed = _bootstrap_draft(spec.bootstrap_checkpoint, prompt, spec.seed,
                                  ("bootstrap", mode.value, index))
    else:
        g = stream(spec.seed, "flaw", mode.value, index)
        flawed = degrade(clean, spec.degrade, g)
    flawed = quantize_colors(flawed)
    plan = client.generate_thinking(prompt, [], "initial")
    reflection = client.generate_thinking(prompt, [flawed, clean], "improving")
    if mode is Mode.IMPROVE_FULL:
        if fidelity_score(clean, ast) <= fidelity_score(flawed, ast):
            raise ForgeError(f"{mode.value}[{index}]: first draft is not "
                             "worse than the target image")
        clean_sem = scene_report(clean, ast).semantic
        if clean_sem < scene_report(flawed, ast).semantic:
            raise ForgeError(f"{mode.value}[{index}]: target loses on "
                             "prompt match")
    return {
        "index": index,
        "mode": mode.value,
        "variant": variant,
        "prompt": prompt,
        "plan": plan,
        "reflection": reflection,
        "clean_hash": raster_hash(clean).hex(),
        "flawed_hash": raster_hash(flawed).hex(),
        "_clean": clean,
        "_flawed": flawed,
    }


def _row_json(row: dict) -> str:
    public = {k: v for k, v in row.items() if not k.startswith("_")}
    return json.dumps(public, sort_keys=True, separators=(",", ":"))


def build_dataset(spec: ForgeSpec, client: ExternalClient | None = None,
                  threads: int = 1) -> dict:
    """Build and write all six manifests; returns the summary dictionary."""
    spec.validate()
    client = client if client is not None else mock_client(spec.seed)
    out = Path(spec.out_dir)
    work = draw_worklist(spec)
    jobs = [(mode, row) for mode in MODE_ORDER for row in work[mode]]

    def run(job: tuple[Mode, dict]) -> tuple[str, dict]:
        mode, row = job
        built = build_sample(spec, mode, row["index"], row["ast"],
                             row["variant"], client)
        return mode.value, built

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    by_mode: dict[str, list[dict]] = {m.value: [] for m in MODE_ORDER}
    for mode_name, built in results:
        by_mode[mode_name].append(built)

    checksums: dict[str, str] = {}
    for mode in MODE_ORDER:
        rows = sorted(by_mode[mode.value], key=lambda r: r["index"])
        img_dir = out / "images" / mode.value
        img_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for row in rows:
            (img_dir / f"{row['index']:05d}-clean.ppm").write_bytes(
                ppm_bytes(row["_clean"]))
            (img_dir / f"{row['index']:05d}-flawed.ppm").write_bytes(
                ppm_bytes(row["_flawed"]))
            lines.append(_row_json(row))
        payload = ("\n".join(lines) + "\n").encode("utf-8")
        (out / f"manifest-{mode.value}.jsonl").write_bytes(payload)
        checksums[mode.value] = hashlib.blake2b(payload,
                                                digest_size=16).hexdigest()

    total = hashlib.blake2b(
        "".join(checksums[m.value] for m in MODE_ORDER).encode("ascii"),
        digest_size=16).hexdigest()
    summary = {
        "seed": spec.seed,
        "counts": {m.value: int(spec.counts[m.value]) for m in MODE_ORDER},
        "degrade": {
            "noise_sigma": spec.degrade.noise_sigma,
            "blur_radius": spec.degrade.blur_radius,
            "jitter": spec.degrade.jitter,
            "color_shift_prob": spec.degrade.color_shift_prob,
        },
        "bootstrap_checkpoint": spec.bootstrap_checkpoint,
        "client": client.describe(),
        "manifest_checksums": checksums,
        "dataset_checksum": total,
    }
    (out / "dataset.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def load_manifest(out_dir: str | Path, mode: Mode) -> list[dict]:
    path = Path(out_dir) / f"manifest-{mode.value}.jsonl"
    if not path.exists():
        raise ForgeError(f"missing manifest: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def record_from_row(out_dir: str | Path, row: dict) -> ModeRecord:
    """Rebuild a training record from one manifest row and its images."""
    ast = parse_prompt(row["prompt"])
    img_dir = Path(out_dir) / "images" / row["mode"]
    clean = ppm_from_bytes(
        (img_dir / f"{row['index']:05d}-clean.ppm").read_bytes())
    flawed = ppm_from_bytes(
        (img_dir / f"{row['index']:05d}-flawed.ppm").read_bytes())
    for img, key in ((clean, "clean_hash"), (flawed, "flawed_hash")):
        if raster_hash(img).hex() != row[key]:
            raise ForgeError(f"{row['mode']}[{row['index']}]: {key} mismatch")
    clean_pool = pool_image(clean)
    return ModeRecord(
        ast=ast,
        prompt=tuple(tokenize_prompt(row["prompt"])),
        plan=tuple(tokenize_thinking(row["plan"])),
        reflection=tuple(tokenize_thinking(row["reflection"])),
        clean=clean_pool,
        flawed=pool_image(flawed),
        target_rows=group_latent(clean_pool.latent),
    )


def load_dataset(out_dir: str | Path) -> dict[Mode, list[ModeRecord]]:
    """Load every manifest back into per-task record pools."""
    return {mode: [record_from_row(out_dir, row)
                   for row in load_manifest(out_dir, mode)]
            for mode in MODE_ORDER}
