"""Domain types, dataset layout and serialization.

A dataset is a directory with an ``index.txt`` listing one sample directory
per line. Each sample directory holds:

    sample.txt   key=value metadata (num_classes, fg_classes, t, height, width)
    label.png    8-bit single-channel raster, pixel value = class id
    frame_00.png ... frame_TT.png   8-bit RGB rasters, frame_00 is I_0
    flow.bin     bidirectional flow, SFLO binary (see below)
    occlusion.bin  bidirectional soft masks, SFLO binary

SFLO binary: 16-byte little-endian header (magic ``SFLO``, version u32,
T u32, H u16, W u16) followed by float32 payload, forward volume then
backward volume, C-order. Flows carry 2 channels per step, masks 1.

Frames are stored as 8-bit rasters (like the real datasets they stand in
for), so the float pipeline round-trips within 1/255 per channel; flows and
masks round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SFLO_MAGIC = b"SFLO"
SFLO_VERSION = 1
_HEADER = struct.Struct("<4sIIHH")  # magic, version, T, H, W


class FormatError(ValueError):
    """Raised on bad headers, shape mismatches or corrupt files."""


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel semantic class indices with a designated foreground subset."""

    classes: np.ndarray  # int grid H x W
    num_classes: int
    fg_class_set: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        cls = np.asarray(self.classes)
        if cls.ndim != 2 or not np.issubdtype(cls.dtype, np.integer):
            raise ValueError("classes must be a 2-D integer grid")
        if cls.size and (cls.min() < 0 or cls.max() >= self.num_classes):
            raise ValueError(
                f"class ids must lie in [0, {self.num_classes}), "
                f"got range [{cls.min()}, {cls.max()}]"
            )
        if not set(self.fg_class_set) <= set(range(self.num_classes)):
            raise ValueError("fg_class_set must be a subset of {0..num_classes-1}")
        object.__setattr__(self, "classes", cls)
        object.__setattr__(self, "fg_class_set", frozenset(self.fg_class_set))

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape


@dataclass(frozen=True)
class FrameSequence:
    """Ordered frames I_0..I_T as a float tensor (T+1, 3, H, W) in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[0] < 2 or f.shape[1] != 3:
            raise ValueError(f"frames must be (T+1, 3, H, W) with T >= 1, got {f.shape}")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        object.__setattr__(self, "frames", f)

    @property
    def t(self) -> int:
        return self.frames.shape[0] - 1


@dataclass(frozen=True)
class FlowVolume:
    """Bidirectional per-timestep displacement fields, pixel units.

    forward[t-1] maps frame-0 pixels to their frame-t positions, backward[t-1]
    maps frame-t pixels back to frame 0. Both are (T, 2, H, W) with channel
    order (u, v) = (x, y) displacement.
    """

    forward: np.ndarray
    backward: np.ndarray

    def __post_init__(self):
        fw = np.asarray(self.forward, dtype=np.float32)
        bw = np.asarray(self.backward, dtype=np.float32)
        if fw.ndim != 4 or fw.shape[1] != 2 or fw.shape != bw.shape:
            raise ValueError(f"flow volumes must match (T, 2, H, W), got {fw.shape} / {bw.shape}")
        if not (np.isfinite(fw).all() and np.isfinite(bw).all()):
            raise ValueError("flow values must be finite")
        object.__setattr__(self, "forward", fw)
        object.__setattr__(self, "backward", bw)

    @property
    def t(self) -> int:
        return self.forward.shape[0]


@dataclass(frozen=True)
class OcclusionVolume:
    """Bidirectional soft correspondence masks in [0, 1], (T, 1, H, W).

    A value of 0 marks a pixel with no correspondence between the two frames.
    """

    forward: np.ndarray
    backward: np.ndarray

    def __post_init__(self):
        fw = np.asarray(self.forward, dtype=np.float32)
        bw = np.asarray(self.backward, dtype=np.float32)
        if fw.ndim != 4 or fw.shape[1] != 1 or fw.shape != bw.shape:
            raise ValueError(f"mask volumes must match (T, 1, H, W), got {fw.shape} / {bw.shape}")
        for m in (fw, bw):
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError("occlusion mask values must lie in [0, 1]")
        object.__setattr__(self, "forward", fw)
        object.__setattr__(self, "backward", bw)


@dataclass(frozen=True)
class LatentCode:
    """Content code z_I0 plus motion code z_m with its posterior parameters.

    mu/logvar are None when z_motion was drawn from the prior.
    """

    z_content: np.ndarray
    z_motion: np.ndarray
    mu: np.ndarray | None = None
    logvar: np.ndarray | None = None

    def __post_init__(self):
        if self.mu is not None or self.logvar is not None:
            if self.mu is None or self.logvar is None:
                raise ValueError("mu and logvar must be given together")
            if not (self.mu.shape[-1] == self.logvar.shape[-1] == self.z_motion.shape[-1]):
                raise ValueError("mu/logvar dims must match z_motion")


@dataclass(frozen=True)
class Sample:
    """One dataset entry: label map, frames, and ground-truth flow/occlusion.

    Flow and occlusion are optional (real-video datasets have none).
    """

    label: LabelMap
    frames: FrameSequence
    flow: FlowVolume | None = None
    occlusion: OcclusionVolume | None = None


# ---------------------------------------------------------------------------
# label-map operations


def one_hot(label: LabelMap) -> np.ndarray:
    """Expand a label map into per-class heatmaps, (C, H, W) float32.

    Channel c is 1 where classes == c and 0 elsewhere, so the channel sum is
    exactly 1 at every pixel.
    """
    cls = label.classes
    if cls.size and cls.max() >= label.num_classes:
        raise ValueError("class id >= num_classes")
    heat = np.zeros((label.num_classes,) + cls.shape, dtype=np.float32)
    ii, jj = np.meshgrid(np.arange(cls.shape[0]), np.arange(cls.shape[1]), indexing="ij")
    heat[cls, ii, jj] = 1.0
    return heat


def split_fg_bg(heatmaps: np.ndarray, fg_class_set) -> tuple[np.ndarray, np.ndarray]:
    """Partition heatmap channels into (foreground, background) stacks.

    fg_class_set must be a nonempty proper subset of the channel indices;
    channels keep ascending class order within each stack.
    """
    c = heatmaps.shape[0]
    fg = sorted(set(fg_class_set))
    if not fg or len(fg) >= c:
        raise ValueError(f"fg_class_set must be a nonempty proper subset of 0..{c - 1}")
    if fg[0] < 0 or fg[-1] >= c:
        raise ValueError(f"fg class outside [0, {c})")
    bg = [i for i in range(c) if i not in set(fg)]
    return heatmaps[fg], heatmaps[bg]


# ---------------------------------------------------------------------------
# raster and binary volume I/O


def frames_to_bytes(frames: np.ndarray) -> np.ndarray:
    """Quantize float frames in [0, 1] to uint8 (round half to even)."""
    return np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)


def bytes_to_frames(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def write_volume(path: Path, forward: np.ndarray, backward: np.ndarray) -> None:
    """Write a bidirectional volume pair as an SFLO binary."""
    t, _, h, w = forward.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SFLO_MAGIC, SFLO_VERSION, t, h, w))
        f.write(np.ascontiguousarray(forward, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(backward, dtype="<f4").tobytes())


def read_volume(path: Path, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Read an SFLO binary back into (forward, backward) float32 arrays."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, t, h, w = _HEADER.unpack_from(raw)
    if magic != SFLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {SFLO_MAGIC!r}")
    if version != SFLO_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = t * channels * h * w
    if len(raw) != _HEADER.size + 2 * n * 4:
        raise FormatError(
            f"{path}: payload size {len(raw) - _HEADER.size} does not match "
            f"header shape ({t}, {channels}, {h}, {w}) x 2 directions"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    shape = (t, channels, h, w)
    return data[:n].reshape(shape).copy(), data[n:].reshape(shape).copy()


def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def _read_meta(path: Path) -> dict:
    meta = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return meta


def save_sample(sample_dir: str | Path, sample: Sample) -> None:
    d = Path(sample_dir)
    d.mkdir(parents=True, exist_ok=True)
    label, frames = sample.label, sample.frames.frames
    _write_meta(
        d / "sample.txt",
        {
            "num_classes": label.num_classes,
            "fg_classes": ",".join(str(c) for c in sorted(label.fg_class_set)),
            "t": frames.shape[0] - 1,
            "height": frames.shape[2],
            "width": frames.shape[3],
        },
    )
    Image.fromarray(label.classes.astype(np.uint8), mode="L").save(d / "label.png")
    for i, frame in enumerate(frames_to_bytes(frames)):
        Image.fromarray(frame.transpose(1, 2, 0), mode="RGB").save(d / f"frame_{i:02d}.png")
    if sample.flow is not None:
        write_volume(d / "flow.bin", sample.flow.forward, sample.flow.backward)
    if sample.occlusion is not None:
        write_volume(d / "occlusion.bin", sample.occlusion.forward, sample.occlusion.backward)


def load_sample(sample_dir: str | Path) -> Sample:
    d = Path(sample_dir)
    meta = _read_meta(d / "sample.txt")
    num_classes = int(meta["num_classes"])
    fg = frozenset(int(c) for c in meta["fg_classes"].split(",") if c.strip() != "")
    t, h, w = int(meta["t"]), int(meta["height"]), int(meta["width"])

    cls = np.asarray(Image.open(d / "label.png"), dtype=np.int64)
    if cls.shape != (h, w):
        raise FormatError(f"{d}: label shape {cls.shape} != metadata ({h}, {w})")
    label = LabelMap(cls, num_classes, fg)

    frames = np.empty((t + 1, 3, h, w), dtype=np.float32)
    for i in range(t + 1):
        path = d / f"frame_{i:02d}.png"
        if not path.exists():
            raise FormatError(f"{d}: missing {path.name}")
        img = np.asarray(Image.open(path), dtype=np.uint8)
        if img.shape != (h, w, 3):
            raise FormatError(f"{d}: frame shape {img.shape} != ({h}, {w}, 3)")
        frames[i] = bytes_to_frames(img.transpose(2, 0, 1))

    flow = occ = None
    if (d / "flow.bin").exists():
        fw, bw = read_volume(d / "flow.bin", channels=2)
        if fw.shape != (t, 2, h, w):
            raise FormatError(f"{d}: flow shape {fw.shape} != ({t}, 2, {h}, {w})")
        flow = FlowVolume(fw, bw)
    if (d / "occlusion.bin").exists():
        fw, bw = read_volume(d / "occlusion.bin", channels=1)
        if fw.shape != (t, 1, h, w):
            raise FormatError(f"{d}: occlusion shape {fw.shape} != ({t}, 1, {h}, {w})")
        occ = OcclusionVolume(fw, bw)
    return Sample(label, FrameSequence(frames), flow, occ)


def write_index(dataset_dir: str | Path, names: list[str]) -> None:
    Path(dataset_dir, "index.txt").write_text("".join(n + "\n" for n in names))


def read_index(dataset_dir: str | Path) -> list[str]:
    path = Path(dataset_dir, "index.txt")
    if not path.exists():
        raise FormatError(f"{dataset_dir}: missing index.txt")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_dataset(dataset_dir: str | Path) -> list[Sample]:
    d = Path(dataset_dir)
    return [load_sample(d / name) for name in read_index(d)]
