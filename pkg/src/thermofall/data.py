"""Dataset ingestion and the synthetic falling-blob generator.

Videos live as directories of zero-padded 8-bit grayscale frames (PGM or
PNG) described by a manifest CSV: video_id,dir,label,split,fps,tags.
Frames are resized to the model resolution first; windows and motion flow
are derived from the resized sequence. Window labels inherit the clip
label.

The synthetic generator mimics the thermal fall signature: a bright round
blob walks in, then collapses into a dimmer elongated shape within a few
frames and stays still. Non-fall clips are walking, sitting (partial
lowering, no elongation), or empty-room noise.
"""
from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .motionflow import FarnebackConfig, farneback_flow, flow_to_channel, resize_bilinear

WINDOW_FRAMES = 10
LABELS = {"fall": 1, "nonfall": 0}
SPLITS = ("train", "val")
KNOWN_BASE_TAGS = frozenset({"height_8ft", "height_9ft", "height_10ft", "hospital", "senior"})
MANIFEST_COLUMNS = ("video_id", "dir", "label", "split", "fps", "tags")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    video_id: str
    directory: Path
    label: str
    split: str
    fps: float
    tags: frozenset[str]

    @property
    def label01(self) -> int:
        return LABELS[self.label]


@dataclass
class Manifest:
    rows: list[ManifestRow]
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def split_rows(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def known_tags(self) -> frozenset[str]:
        seen = set(KNOWN_BASE_TAGS)
        for row in self.rows:
            seen.update(row.tags)
        return frozenset(seen)


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {path} is empty") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"manifest {path} has columns {header}, expected {list(MANIFEST_COLUMNS)}"
            )
        rows: list[ManifestRow] = []
        seen_ids: set[str] = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"manifest {path}:{lineno} has {len(rec)} fields")
            video_id, directory, label, split, fps, tags = (c.strip() for c in rec)
            if video_id in seen_ids:
                raise ManifestError(f"duplicate video_id {video_id!r} in {path}")
            seen_ids.add(video_id)
            if label not in LABELS:
                raise ManifestError(f"unknown label {label!r} for {video_id!r}; expected fall|nonfall")
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r} for {video_id!r}; expected train|val")
            tag_set = frozenset(t for t in tags.split("|") if t)
            dir_path = Path(directory)
            if not dir_path.is_absolute():
                dir_path = path.parent / dir_path
            rows.append(ManifestRow(video_id, dir_path, label, split, float(fps), tag_set))
    if not rows:
        raise ManifestError(f"manifest {path} contains no rows")
    return Manifest(rows, path)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for row in manifest.rows:
            directory = row.directory
            try:
                directory = directory.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow(
                [row.video_id, str(directory), row.label, row.split,
                 f"{row.fps:g}", "|".join(sorted(row.tags))]
            )


def filter_subset(manifest: Manifest, tag: str) -> Manifest:
    known = manifest.known_tags()
    if tag not in known:
        raise ManifestError(f"unknown tag {tag!r}; valid tags: {', '.join(sorted(known))}")
    kept = [r for r in manifest.rows if tag in r.tags]
    if not kept:
        warnings.warn(f"tag {tag!r} matches no manifest rows", stacklevel=2)
    return Manifest(kept, manifest.path)


# -- frame I/O ------------------------------------------------------------------


def write_pgm(path, img_u8: np.ndarray) -> None:
    h, w = img_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img_u8, dtype=np.uint8).tobytes())


def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        match = re.compile(rb"\s*(?:#[^\n]*\n)*\s*(\S+)").match(data, pos)
        if match is None:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(match.group(1))
        pos = match.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5" or maxval != 255:
        raise ValueError(f"{path}: expected binary 8-bit PGM (P5, maxval 255)")
    payload = data[pos + 1 : pos + 1 + w * h]
    if len(payload) != w * h:
        raise ValueError(f"{path}: PGM payload truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float32)


def read_frame(path) -> np.ndarray:
    """8-bit grayscale frame as float32 in [0,1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        raw = _read_pgm(path)
    elif path.suffix.lower() == ".png":
        with Image.open(path) as img:
            raw = np.asarray(img.convert("L"), dtype=np.float32)
    else:
        raise ValueError(f"unsupported frame format {path.suffix!r} ({path})")
    return raw / 255.0


_FRAME_INDEX = re.compile(r"(\d+)$")


def load_frames(directory, resize_to: tuple[int, int]) -> np.ndarray:
    """All frames of one video as (N,H,W,1) float32 in [0,1], bilinearly
    resized, in index order. Indices must be consecutive."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory {directory} does not exist")
    entries = []
    for p in directory.iterdir():
        if p.suffix.lower() not in (".pgm", ".png"):
            continue
        m = _FRAME_INDEX.search(p.stem)
        if m is None:
            raise ValueError(f"frame {p.name} has no trailing index")
        entries.append((int(m.group(1)), p))
    if not entries:
        raise FileNotFoundError(f"no PGM/PNG frames in {directory}")
    entries.sort()
    indices = [i for i, _ in entries]
    if len(set(indices)) != len(indices):
        raise ValueError(f"duplicate frame indices in {directory}")
    expected = list(range(indices[0], indices[0] + len(indices)))
    if indices != expected:
        missing = sorted(set(expected) - set(indices))[:3]
        raise ValueError(f"non-consecutive frame indices in {directory}; first gaps at {missing}")
    h, w = resize_to
    out = np.empty((len(entries), h, w, 1), dtype=np.float32)
    for k, (_, p) in enumerate(entries):
        out[k, :, :, 0] = resize_bilinear(read_frame(p), h, w)
    return out


# -- windows --------------------------------------------------------------------


def stride_for_fps(fps: float) -> int:
    """Every third frame for high-rate (~12 fps) sources, every frame at 4 fps."""
    return 3 if fps >= 10 else 1


@dataclass
class WindowSample:
    frames: np.ndarray  # (10,H,W,1) float32 in [0,1]
    label: int
    video_id: str
    start_frame: int
    motion: np.ndarray | None = None  # (10,H,W,1)

    def __post_init__(self):
        if self.frames.shape[0] != WINDOW_FRAMES:
            raise ValueError(f"window must hold {WINDOW_FRAMES} frames, got {self.frames.shape}")
        if self.motion is not None and self.motion.shape != self.frames.shape:
            raise ValueError(f"motion shape {self.motion.shape} != frames {self.frames.shape}")

    def features(self) -> np.ndarray:
        if self.motion is None:
            return self.frames
        return np.concatenate([self.frames, self.motion], axis=-1)


def window_sampler(frames: np.ndarray, fps: float, subsample_stride: int | None = None,
                   window: int = WINDOW_FRAMES, hop: int = 1):
    """Subsample every `subsample_stride`-th frame, then emit overlapping
    `window`-frame slices advancing by `hop`.

    Returns (windows, starts): starts are indices into the original frame
    sequence. Too few frames yields an empty result with a warning.
    """
    stride = subsample_stride if subsample_stride is not None else stride_for_fps(fps)
    retained = frames[::stride]
    n = retained.shape[0]
    if n < window:
        warnings.warn(f"only {n} retained frames; need {window} for one window", stacklevel=2)
        return [], []
    count = (n - window) // hop + 1
    windows = [retained[i * hop : i * hop + window] for i in range(count)]
    starts = [i * hop * stride for i in range(count)]
    return windows, starts


def motion_channels(frames: np.ndarray, cfg: FarnebackConfig | None = None,
                    max_magnitude: float = 10.0) -> np.ndarray:
    """Per-frame motion magnitude channel: flow between each frame and its
    predecessor, zeros for the first frame."""
    n, h, w, _ = frames.shape
    out = np.zeros((n, h, w, 1), dtype=np.float32)
    for i in range(1, n):
        flow = farneback_flow(frames[i - 1, :, :, 0], frames[i, :, :, 0], cfg)
        out[i, :, :, 0] = flow_to_channel(flow, max_magnitude)
    return out


def build_window_dataset(manifest: Manifest, split: str, resize_to: tuple[int, int],
                         hop: int = 1, with_motion: bool = False,
                         flow_cfg: FarnebackConfig | None = None) -> list[WindowSample]:
    """Materialize every window of every video in a split.

    With motion enabled, flow is computed between consecutive retained
    frames of the resized sequence; window slicing then applies to frames
    and motion identically.
    """
    samples: list[WindowSample] = []
    for row in manifest.split_rows(split):
        frames = load_frames(row.directory, resize_to)
        stride = stride_for_fps(row.fps)
        retained = frames[::stride]
        motion = motion_channels(retained, flow_cfg) if with_motion else None
        windows, starts = window_sampler(frames, row.fps, stride, hop=hop)
        for idx, (win, start) in enumerate(zip(windows, starts)):
            m = None
            if motion is not None:
                pos = start // stride
                m = motion[pos : pos + WINDOW_FRAMES]
            samples.append(
                WindowSample(frames=win, label=row.label01, video_id=row.video_id,
                             start_frame=start, motion=m)
            )
    return samples


# -- synthetic dataset ------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_fall: int = 25
    n_nonfall: int = 25
    extent: int = 32
    frames_per_clip: int = 19
    seed: int = 0
    noise_sigma: float = 0.02
    fps: float = 4.0

    def __post_init__(self):
        if self.extent < 16:
            raise ValueError(f"extent must be >= 16, got {self.extent}")
        if self.frames_per_clip < WINDOW_FRAMES:
            raise ValueError(f"clips need at least {WINDOW_FRAMES} frames")


def _render_blob(extent: int, cx: float, cy: float, sx: float, sy: float, amp: float) -> np.ndarray:
    ys, xs = np.mgrid[0:extent, 0:extent].astype(np.float64)
    return amp * np.exp(-(((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2) / 2.0)


def _fall_track(cfg: SynthConfig, rng: np.random.Generator):
    e = cfg.extent
    sigma0 = 0.09 * e
    amp0 = rng.uniform(0.85, 0.95)
    walk = int(rng.integers(4, 7))
    collapse = int(rng.integers(4, 7))
    cx = rng.uniform(0.2, 0.3) * e
    cy = rng.uniform(0.35, 0.5) * e
    vx = rng.uniform(0.02, 0.035) * e
    track = []
    for t in range(cfg.frames_per_clip):
        if t < walk:
            track.append((cx + vx * t, cy, sigma0, sigma0, amp0))
        else:
            # end state: sx 2.35x, sy 0.78x (aspect 3); amplitude follows
            # from integral conservation (-> 0.55x peak) so a global-mean
            # threshold classifier stays blind to the class
            frac = min(1.0, (t - walk + 1) / collapse)
            sx = sigma0 * (1.0 + 1.35 * frac)
            sy = sigma0 * (1.0 - 0.22 * frac)
            amp = amp0 * sigma0 * sigma0 / (sx * sy)
            track.append((cx + vx * walk + 0.04 * e * frac, cy + 0.12 * e * frac, sx, sy, amp))
    return track


def _walk_track(cfg: SynthConfig, rng: np.random.Generator):
    e = cfg.extent
    sigma0 = 0.09 * e
    amp0 = rng.uniform(0.85, 0.95)
    cx = rng.uniform(0.15, 0.3) * e
    cy = rng.uniform(0.3, 0.7) * e
    vx = rng.uniform(0.02, 0.045) * e
    wob = rng.uniform(0.005, 0.02) * e
    return [
        (cx + vx * t, cy + wob * np.sin(0.9 * t), sigma0, sigma0, amp0)
        for t in range(cfg.frames_per_clip)
    ]


def _sit_track(cfg: SynthConfig, rng: np.random.Generator):
    e = cfg.extent
    sigma0 = 0.09 * e
    amp0 = rng.uniform(0.85, 0.95)
    walk = int(rng.integers(4, 7))
    lower = int(rng.integers(3, 5))
    cx = rng.uniform(0.25, 0.4) * e
    cy = rng.uniform(0.3, 0.5) * e
    vx = rng.uniform(0.02, 0.04) * e
    track = []
    for t in range(cfg.frames_per_clip):
        if t < walk:
            track.append((cx + vx * t, cy, sigma0, sigma0, amp0))
        else:
            frac = min(1.0, (t - walk + 1) / lower)
            track.append(
                (
                    cx + vx * walk,
                    cy + 0.06 * e * frac,          # partial lowering
                    sigma0 * (1.0 + 0.25 * frac),  # mild widening, aspect stays < 2
                    sigma0 * (1.0 - 0.2 * frac),
                    amp0 * (1.0 - 0.1 * frac),
                )
            )
    return track


_NONFALL_KINDS = ("walking", "sitting", "walking", "sitting", "empty")


def _clip_frames(cfg: SynthConfig, kind: str, rng: np.random.Generator) -> np.ndarray:
    e = cfg.extent
    background = 0.06
    if kind == "fall":
        track = _fall_track(cfg, rng)
    elif kind == "walking":
        track = _walk_track(cfg, rng)
    elif kind == "sitting":
        track = _sit_track(cfg, rng)
    else:
        track = None
    frames = np.empty((cfg.frames_per_clip, e, e), dtype=np.float32)
    for t in range(cfg.frames_per_clip):
        img = np.full((e, e), background)
        if track is not None:
            cx, cy, sx, sy, amp = track[t]
            img = img + _render_blob(e, cx, cy, sx, sy, amp)
        img = img + rng.normal(0.0, cfg.noise_sigma, size=(e, e))
        frames[t] = np.clip(img, 0.0, 1.0)
    return frames


def _synth_tags(i: int) -> frozenset[str]:
    tags = {("height_8ft", "height_9ft", "height_10ft")[i % 3]}
    if i % 4 == 0:
        tags.add("senior")
    if i % 5 == 0:
        tags.add("hospital")
    return frozenset(tags)


def synth_fall_dataset(out_dir, cfg: SynthConfig | None = None, **kwargs) -> Manifest:
    """Render the synthetic corpus into out_dir and write manifest.csv.

    Deterministic for a given seed: every clip derives its own generator
    from (seed, class, index). The per-class 80:20 split is by clip order.
    """
    if cfg is None:
        cfg = SynthConfig(**kwargs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []

    def emit(video_id: str, kind: str, label: str, split: str, clip_rng, tag_idx: int):
        clip_dir = out_dir / video_id
        clip_dir.mkdir(exist_ok=True)
        frames = _clip_frames(cfg, kind, clip_rng)
        for t in range(frames.shape[0]):
            write_pgm(clip_dir / f"frame_{t:04d}.pgm", np.round(frames[t] * 255).astype(np.uint8))
        rows.append(ManifestRow(video_id, clip_dir, label, split, cfg.fps, _synth_tags(tag_idx)))

    n_fall_train = round(cfg.n_fall * 0.8)
    for i in range(cfg.n_fall):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, i]))
        split = "train" if i < n_fall_train else "val"
        emit(f"fall_{i:03d}", "fall", "fall", split, rng, i)
    n_non_train = round(cfg.n_nonfall * 0.8)
    for i in range(cfg.n_nonfall):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, i]))
        split = "train" if i < n_non_train else "val"
        kind = _NONFALL_KINDS[i % len(_NONFALL_KINDS)]
        emit(f"nonfall_{i:03d}", kind, "nonfall", split, rng, i)

    manifest = Manifest(rows)
    save_manifest(manifest, out_dir / "manifest.csv")
    return load_manifest(out_dir / "manifest.csv")
