"""Trajectory container: ordered segments with a sealed-pixels contract.

A trajectory is prompt, first thinking, first image, then repeated rounds of
encoded features, improving thinking, and an improved image.  The moment a
round starts, the previous image's pixels are replaced by a content hash;
later turns can only see that image through its encoded features.  The final
image keeps its pixels because it is the product.

Binary layout (magic ``IRG1``): all integers little-endian, floats ``<f4``,
and a trailing 8-byte content checksum over everything before it.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MAGIC = b"IRG1"
VERSION = 1


class SealedPixelsError(RuntimeError):
    """Raised when code asks for raw pixels of an already-sealed image."""


class TrajectoryError(ValueError):
    """Raised for segment sequences the grammar does not allow."""


class SegmentRole(enum.IntEnum):
    PROMPT = 0
    INITIAL_THINKING = 1
    INITIAL_IMAGE = 2
    ENCODED_FEATURES = 3
    UNDERSTANDING_QUESTION = 4
    IMPROVING_THINKING = 5
    IMPROVED_IMAGE = 6


TEXT_ROLES = frozenset({
    SegmentRole.PROMPT,
    SegmentRole.INITIAL_THINKING,
    SegmentRole.UNDERSTANDING_QUESTION,
    SegmentRole.IMPROVING_THINKING,
})
IMAGE_ROLES = frozenset({SegmentRole.INITIAL_IMAGE, SegmentRole.IMPROVED_IMAGE})


def raster_hash(img: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<HH", img.shape[0], img.shape[1]))
    h.update(np.ascontiguousarray(img, dtype="<f4").tobytes())
    return h.digest()


@dataclass(frozen=True)
class FeatureBundle:
    """Everything later turns may know about an image.

    ``semantic`` holds the learned per-patch summary rows (pooled colors
    projected to model width plus a 2D position code); ``latent`` is the
    raster in encoder space.  ``source_hash`` pins the bundle to the exact
    pixels it was computed from.
    """

    semantic: np.ndarray  # (n_patches, d_model) float32
    latent: np.ndarray    # (n_cells, d_z) float32
    source_hash: bytes

    def __eq__(self, other) -> bool:
        return (isinstance(other, FeatureBundle)
                and np.array_equal(self.semantic, other.semantic)
                and np.array_equal(self.latent, other.latent)
                and self.source_hash == other.source_hash)


@dataclass(frozen=True)
class Segment:
    role: SegmentRole
    tokens: np.ndarray | None = None        # int64 ids for text roles
    raster: np.ndarray | None = None        # float32 pixels until sealed
    features: FeatureBundle | None = None   # encoded-feature roles only
    pixel_hash: bytes | None = None         # set once the raster is sealed

    @property
    def sealed(self) -> bool:
        return self.role in IMAGE_ROLES and self.raster is None

    @property
    def image(self) -> np.ndarray:
        if self.role not in IMAGE_ROLES:
            raise TrajectoryError(f"{self.role.name} segment has no image")
        if self.raster is None:
            raise SealedPixelsError(
                "image pixels were sealed; only encoded features remain")
        return self.raster

    def __eq__(self, other) -> bool:
        if not isinstance(other, Segment) or self.role != other.role:
            return False
        for mine, theirs in ((self.tokens, other.tokens),
                             (self.raster, other.raster)):
            if (mine is None) != (theirs is None):
                return False
            if mine is not None and not np.array_equal(mine, theirs):
                return False
        return (self.features == other.features
                and self.pixel_hash == other.pixel_hash)


_NEXT: dict[SegmentRole | None, frozenset[SegmentRole]] = {
    None: frozenset({SegmentRole.PROMPT}),
    SegmentRole.PROMPT: frozenset({SegmentRole.INITIAL_THINKING,
                                   SegmentRole.INITIAL_IMAGE}),
    SegmentRole.INITIAL_THINKING: frozenset({SegmentRole.INITIAL_IMAGE}),
    SegmentRole.INITIAL_IMAGE: frozenset({SegmentRole.ENCODED_FEATURES}),
    SegmentRole.ENCODED_FEATURES: frozenset({SegmentRole.IMPROVING_THINKING}),
    SegmentRole.IMPROVING_THINKING: frozenset({SegmentRole.IMPROVED_IMAGE}),
    SegmentRole.IMPROVED_IMAGE: frozenset({SegmentRole.ENCODED_FEATURES}),
}


class Trajectory:
    """Mutable segment sequence enforcing order and the sealed-pixels rule."""

    def __init__(self, prompt_text: str = ""):
        self.prompt_text = prompt_text
        self.segments: list[Segment] = []

    def append(self, segment: Segment) -> None:
        last = self.segments[-1].role if self.segments else None
        allowed = _NEXT.get(last, frozenset())
        if segment.role not in allowed:
            names = sorted(r.name for r in allowed) or ["nothing"]
            raise TrajectoryError(
                f"cannot append {segment.role.name} after "
                f"{last.name if last else 'start'}; expected one of {names}")
        if segment.role in TEXT_ROLES and segment.tokens is None:
            raise TrajectoryError(f"{segment.role.name} segment needs tokens")
        if segment.role in IMAGE_ROLES and segment.raster is None:
            raise TrajectoryError(f"{segment.role.name} segment needs pixels")
        if segment.role is SegmentRole.ENCODED_FEATURES:
            if segment.features is None:
                raise TrajectoryError("ENCODED_FEATURES segment needs features")
            prev = self.segments[-1]
            if segment.features.source_hash != raster_hash(prev.image):
                raise TrajectoryError(
                    "encoded features do not match the image they follow")
            self.segments[-1] = replace(
                prev, raster=None, pixel_hash=segment.features.source_hash)
        self.segments.append(segment)

    @property
    def complete(self) -> bool:
        return bool(self.segments) and self.segments[-1].role in IMAGE_ROLES

    @property
    def final_image(self) -> np.ndarray:
        if not self.complete:
            raise TrajectoryError("trajectory does not end in an image")
        return self.segments[-1].image

    def images_generated(self) -> int:
        return sum(1 for s in self.segments if s.role in IMAGE_ROLES)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Trajectory)
                and self.prompt_text == other.prompt_text
                and self.segments == other.segments)


def _pack_array(out: list[bytes], arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    out.append(struct.pack("<HH", data.shape[0], data.shape[1]))
    out.append(data.tobytes())


def _unpack_array(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    rows, cols = struct.unpack_from("<HH", buf, off)
    off += 4
    n = rows * cols * 4
    arr = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off)
    return arr.reshape(rows, cols).astype(np.float32), off + n


def to_bytes(traj: Trajectory) -> bytes:
    out: list[bytes] = [MAGIC, struct.pack("<H", VERSION)]
    prompt = traj.prompt_text.encode("utf-8")
    out.append(struct.pack("<I", len(prompt)))
    out.append(prompt)
    out.append(struct.pack("<H", len(traj.segments)))
    for seg in traj.segments:
        flags = 1 if seg.sealed else 0
        out.append(struct.pack("<BB", int(seg.role), flags))
        if seg.role in TEXT_ROLES:
            ids = np.ascontiguousarray(seg.tokens, dtype="<u4")
            out.append(struct.pack("<I", ids.size))
            out.append(ids.tobytes())
        elif seg.role in IMAGE_ROLES:
            if seg.sealed:
                out.append(seg.pixel_hash)
            else:
                img = np.ascontiguousarray(seg.raster, dtype="<f4")
                out.append(struct.pack("<HH", img.shape[0], img.shape[1]))
                out.append(img.tobytes())
        else:
            _pack_array(out, seg.features.semantic)
            _pack_array(out, seg.features.latent)
            out.append(seg.features.source_hash)
    body = b"".join(out)
    digest = hashlib.blake2b(body, digest_size=8).digest()
    return body + digest


def from_bytes(buf: bytes) -> Trajectory:
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise ValueError("not a trajectory container")
    body, digest = buf[:-8], buf[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise ValueError("trajectory container checksum mismatch")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported trajectory version {version}")
    off = 6
    (n_prompt,) = struct.unpack_from("<I", buf, off)
    off += 4
    prompt_text = buf[off:off + n_prompt].decode("utf-8")
    off += n_prompt
    (n_segments,) = struct.unpack_from("<H", buf, off)
    off += 2
    traj = Trajectory(prompt_text)
    for _ in range(n_segments):
        role_id, flags = struct.unpack_from("<BB", buf, off)
        off += 2
        role = SegmentRole(role_id)
        if role in TEXT_ROLES:
            (n_tok,) = struct.unpack_from("<I", buf, off)
            off += 4
            ids = np.frombuffer(buf, dtype="<u4", count=n_tok, offset=off)
            off += 4 * n_tok
            seg = Segment(role, tokens=ids.astype(np.int64))
        elif role in IMAGE_ROLES:
            if flags & 1:
                seg = Segment(role, pixel_hash=buf[off:off + 16])
                off += 16
            else:
                h, w = struct.unpack_from("<HH", buf, off)
                off += 4
                img = np.frombuffer(buf, dtype="<f4", count=h * w * 3,
                                    offset=off)
                off += 4 * h * w * 3
                seg = Segment(role, raster=img.reshape(h, w, 3).astype(np.float32))
        else:
            semantic, off = _unpack_array(buf, off)
            latent, off = _unpack_array(buf, off)
            source = buf[off:off + 16]
            off += 16
            seg = Segment(role, features=FeatureBundle(semantic, latent, source))
        traj.segments.append(seg)  # bypass grammar: stored order is trusted
    if off != len(body):
        raise ValueError("trailing bytes in trajectory container")
    return traj


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(traj))


def load_trajectory(path: str | Path) -> Trajectory:
    return from_bytes(Path(path).read_bytes())
