"""Corpus handling: synthetic face videos, input features, binary storage.

A frame carries a grayscale rendering of a schematic 73-point face, its
Sobel edge map, the landmark coordinates, and one binary label per
action unit (-1 marks unknown).  Videos are generated by a five-state
expression Markov chain; activations ramp linearly over three frames so
that labels flip before the face fully settles, which is the only label
noise in the default corpus.

Pixel planes are quantised to the u8 grid at generation time, so a
store/load round trip reproduces frames bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import ByteReader, pack_str
from .errors import ContractViolation, EmptyCorpusError, FormatError

AU_ORDER = ("AU1", "AU2", "AU4", "AU6", "AU12", "AU15", "AU20", "AU25")

# expression prototypes of the generator's Markov chain, in state order
EXPRESSION_STATES = ("neutral", "surprise", "happy", "sad", "fear")
EXPRESSION_PROTOTYPES = {
    "neutral": frozenset(),
    "surprise": frozenset({"AU1", "AU2", "AU25"}),
    "happy": frozenset({"AU6", "AU12", "AU25"}),
    "sad": frozenset({"AU1", "AU4", "AU15"}),
    "fear": frozenset({"AU1", "AU2", "AU4", "AU20", "AU25"}),
}

PROTOTYPE_LABELS = np.array(
    [[1 if au in EXPRESSION_PROTOTYPES[s] else 0 for au in AU_ORDER] for s in EXPRESSION_STATES],
    dtype=np.int8,
)

# landmark layout: slices into the 73 x 2 coordinate array
JAW = slice(0, 17)
LEFT_BROW = slice(17, 23)
RIGHT_BROW = slice(23, 29)
NOSE = slice(29, 38)
LEFT_EYE = slice(38, 46)
RIGHT_EYE = slice(46, 54)
OUTER_LIP = slice(54, 66)
INNER_LIP = slice(66, 73)

LANDMARK_COUNT = 73
DISPLACEMENT_SCALE = 0.04
RAMP_STEP = 1.0 / 3.0


def _build_template() -> np.ndarray:
    pts = np.zeros((LANDMARK_COUNT, 2))
    theta = np.arange(17) * np.pi / 16
    pts[JAW, 0] = 0.5 - 0.28 * np.cos(theta)
    pts[JAW, 1] = 0.35 + 0.45 * np.sin(theta)

    i = np.arange(6)
    arch = 0.30 - 0.02 * np.sin(i * np.pi / 5)
    pts[LEFT_BROW, 0] = 0.28 + 0.032 * i  # outer to inner
    pts[LEFT_BROW, 1] = arch
    pts[RIGHT_BROW, 0] = 0.72 - 0.032 * i
    pts[RIGHT_BROW, 1] = arch

    bridge = np.arange(4)
    pts[29:33, 0] = 0.5
    pts[29:33, 1] = 0.36 + 0.05 * bridge
    base = np.arange(5)
    pts[33:38, 0] = 0.44 + 0.03 * base
    pts[33:38, 1] = 0.575 - 0.005 * np.abs(base - 2)

    def eye(cx):
        ang = np.pi - np.arange(8) * np.pi / 4  # index 0 at the left extreme
        return np.stack([cx + 0.055 * np.cos(ang), 0.40 - 0.025 * np.sin(ang)], axis=1)

    pts[LEFT_EYE] = eye(0.37)
    pts[RIGHT_EYE] = eye(0.63)

    ang = np.pi - np.arange(12) * np.pi / 6  # 0: left corner, 6: right corner
    pts[OUTER_LIP, 0] = 0.5 + 0.11 * np.cos(ang)
    pts[OUTER_LIP, 1] = 0.68 - 0.045 * np.sin(ang)
    ang = np.pi - np.arange(7) * 2 * np.pi / 7
    pts[INNER_LIP, 0] = 0.5 + 0.08 * np.cos(ang)
    pts[INNER_LIP, 1] = 0.68 - 0.006 * np.sin(ang)
    return pts


LANDMARK_TEMPLATE = _build_template()
LANDMARK_TEMPLATE.setflags(write=False)


def _build_displacements() -> np.ndarray:
    """Unit displacement field per AU, scaled by DISPLACEMENT_SCALE."""
    moves = {
        # inner / outer brow raisers, brow lowerer pulls down and inward
        "AU1": [(i, 0.0, -1.0) for i in (20, 21, 22, 26, 27, 28)],
        "AU2": [(i, 0.0, -1.0) for i in (17, 18, 19, 23, 24, 25)],
        "AU4": [(i, 0.5, 0.75) for i in range(17, 23)]
        + [(i, -0.5, 0.75) for i in range(23, 29)],
        # cheek raiser lifts the lower lids
        "AU6": [(i, 0.0, -0.75) for i in (43, 44, 45, 51, 52, 53)],
        # lip corner puller / depressor / stretcher act on the mouth corners
        "AU12": [(54, -0.7, -0.7), (60, 0.7, -0.7),
                 (55, -0.35, -0.35), (65, -0.35, -0.35),
                 (59, 0.35, -0.35), (61, 0.35, -0.35)],
        "AU15": [(54, 0.0, 1.0), (60, 0.0, 1.0),
                 (55, 0.0, 0.5), (65, 0.0, 0.5),
                 (59, 0.0, 0.5), (61, 0.0, 0.5)],
        "AU20": [(54, -1.0, 0.0), (60, 1.0, 0.0),
                 (55, -0.5, 0.0), (65, -0.5, 0.0),
                 (59, 0.5, 0.0), (61, 0.5, 0.0)],
        # lips part: inner lip halves separate, lower outer lip follows
        "AU25": [(i, 0.0, -0.75) for i in (67, 68, 69)]
        + [(i, 0.0, 0.75) for i in (70, 71, 72)]
        + [(i, 0.0, 0.4) for i in range(61, 66)],
    }
    field_ = np.zeros((len(AU_ORDER), LANDMARK_COUNT, 2))
    for k, au in enumerate(AU_ORDER):
        for idx, ux, uy in moves[au]:
            field_[k, idx, 0] += DISPLACEMENT_SCALE * ux
            field_[k, idx, 1] += DISPLACEMENT_SCALE * uy
    return field_


AU_DISPLACEMENTS = _build_displacements()
AU_DISPLACEMENTS.setflags(write=False)


def displaced_landmarks(intensities: np.ndarray) -> np.ndarray:
    """Template deformed by per-AU activation strengths in [0, 1]."""
    w = np.asarray(intensities, dtype=np.float64)
    if w.shape != (len(AU_ORDER),):
        raise ContractViolation(f"intensities must be ({len(AU_ORDER)},), got {w.shape}")
    return LANDMARK_TEMPLATE + np.tensordot(w, AU_DISPLACEMENTS, axes=1)


# ---------------------------------------------------------------------------
# samples


@dataclass
class FrameSample:
    """One video frame with features and per-AU labels."""

    video_id: str
    frame_index: int
    gray: np.ndarray  # 1 x H x W float32 in [0, 1]
    edge: np.ndarray  # 1 x H x W float32 in [0, 1]
    landmarks: np.ndarray  # 73 x 2 float32, normalised coordinates
    labels: np.ndarray  # 8 int8 in {0, 1, -1}

    def __post_init__(self):
        if self.gray.ndim != 3 or self.gray.shape[0] != 1:
            raise ContractViolation(f"gray must be 1,H,W, got {self.gray.shape}")
        if self.edge.shape != self.gray.shape:
            raise ContractViolation(
                f"edge {self.edge.shape} does not match gray {self.gray.shape}"
            )
        if self.landmarks.shape != (LANDMARK_COUNT, 2):
            raise ContractViolation(f"landmarks must be 73 x 2, got {self.landmarks.shape}")
        if self.labels.shape != (len(AU_ORDER),):
            raise ContractViolation(f"labels must be ({len(AU_ORDER)},), got {self.labels.shape}")
        if not np.isin(self.labels, (-1, 0, 1)).all():
            raise ContractViolation(f"labels outside {{-1, 0, 1}}: {self.labels.tolist()}")
        for name, plane in (("gray", self.gray), ("edge", self.edge)):
            if plane.size and (plane.min() < 0.0 or plane.max() > 1.0):
                raise ContractViolation(
                    f"{name} values outside [0, 1]: [{plane.min()}, {plane.max()}]"
                )

    def image_stack(self) -> np.ndarray:
        """Gray and edge planes as one 2 x H x W array."""
        return np.concatenate([self.gray, self.edge], axis=0)


@dataclass
class VideoSequence:
    """Consecutive frames of one video, indices starting at 0."""

    video_id: str
    frames: list[FrameSample] = field(default_factory=list)

    def __post_init__(self):
        # motion features need a neighbour on at least one side of every frame
        if len(self.frames) < 3:
            raise ContractViolation(
                f"video {self.video_id!r} has {len(self.frames)} frames, need >= 3"
            )
        for t, fr in enumerate(self.frames):
            if fr.video_id != self.video_id:
                raise ContractViolation(
                    f"frame {t} belongs to {fr.video_id!r}, not {self.video_id!r}"
                )
            if fr.frame_index != t:
                raise ContractViolation(
                    f"video {self.video_id!r}: frame {t} carries index {fr.frame_index}"
                )

    def __len__(self):
        return len(self.frames)

    def landmarks_array(self) -> np.ndarray:
        return np.stack([f.landmarks for f in self.frames])

    def labels_array(self) -> np.ndarray:
        return np.stack([f.labels for f in self.frames])


# ---------------------------------------------------------------------------
# input features


def sobel_edge(gray: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude, replicate padding, peak-normalised.

    Takes and returns a 1 x H x W array.  The result is divided by
    max(1e-8, max magnitude), so values land in [0, 1] and a flat
    image maps to all zeros.
    """
    if gray.ndim != 3 or gray.shape[0] != 1:
        raise ContractViolation(f"sobel_edge: expected 1,H,W, got {gray.shape}")
    if gray.shape[1] < 3 or gray.shape[2] < 3:
        raise ContractViolation(f"sobel_edge: image must be at least 3 x 3, got {gray.shape}")
    g = gray[0].astype(np.float64)
    p = np.pad(g, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (
        p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2]
    )
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (
        p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:]
    )
    mag = np.sqrt(gx * gx + gy * gy)
    mag /= max(1e-8, mag.max())
    return mag[None].astype(gray.dtype)


def landmark_diff(landmarks: "np.ndarray | VideoSequence", t: int) -> np.ndarray:
    """Scaled landmark motion around frame t, flattened to 146 values.

    diff = 10 * (L[min(t+1, T-1)] - L[max(t-1, 0)]), laid out as
    x0, y0, x1, y1, ...  Endpoints clamp, so first and last frames use
    a one-sided difference.  Accepts a VideoSequence or a T x 73 x 2
    array of per-frame landmarks.
    """
    if isinstance(landmarks, VideoSequence):
        landmarks = landmarks.landmarks_array()
    if landmarks.ndim != 3 or landmarks.shape[1:] != (LANDMARK_COUNT, 2):
        raise ContractViolation(f"landmark_diff: expected T,73,2, got {landmarks.shape}")
    n = landmarks.shape[0]
    if not 0 <= t < n:
        raise ContractViolation(f"landmark_diff: frame {t} out of range for {n} frames")
    ahead = landmarks[min(t + 1, n - 1)]
    behind = landmarks[max(t - 1, 0)]
    return (10.0 * (ahead - behind)).reshape(-1)


def landmark_diffs(video: VideoSequence) -> np.ndarray:
    """Motion features for every frame of a video, T x 146."""
    lm = video.landmarks_array()
    return np.stack([landmark_diff(lm, t) for t in range(len(video))])


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    videos: int = 50
    frames_per_video: int = 60
    seed: int = 7
    image_size: int = 64
    stay_probability: float = 0.92
    label_flip_noise: float = 0.0
    landmark_jitter_sigma: float = 0.005
    pixel_noise_sigma: float = 0.02

    def validate(self):
        if self.videos < 1:
            raise ContractViolation(f"videos must be >= 1, got {self.videos}")
        if self.frames_per_video < 3:
            raise ContractViolation(
                f"frames_per_video must be >= 3, got {self.frames_per_video}"
            )
        if self.image_size < 8:
            raise ContractViolation(f"image_size must be >= 8, got {self.image_size}")
        if not 0.0 <= self.stay_probability <= 1.0:
            raise ContractViolation(
                f"stay_probability must be in [0, 1], got {self.stay_probability}"
            )
        if not 0.0 <= self.label_flip_noise <= 1.0:
            raise ContractViolation(
                f"label_flip_noise must be in [0, 1], got {self.label_flip_noise}"
            )
        if self.landmark_jitter_sigma < 0 or self.pixel_noise_sigma < 0:
            raise ContractViolation("noise sigmas must be >= 0")


_DRAWN_GROUPS = (
    (LEFT_BROW, False),
    (RIGHT_BROW, False),
    (LEFT_EYE, True),
    (RIGHT_EYE, True),
    (OUTER_LIP, True),
    (INNER_LIP, True),
)


def _draw_segment(cov: np.ndarray, ax, ay, bx, by):
    size = cov.shape[0]
    c0 = max(0, int(np.floor(min(ax, bx) - 2)))
    c1 = min(size - 1, int(np.ceil(max(ax, bx) + 2)))
    r0 = max(0, int(np.floor(min(ay, by) - 2)))
    r1 = min(size - 1, int(np.ceil(max(ay, by) + 2)))
    if c0 > c1 or r0 > r1:
        return
    px = np.arange(c0, c1 + 1)[None, :]
    py = np.arange(r0, r1 + 1)[:, None]
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    if seg2 < 1e-12:
        t = np.zeros((r1 - r0 + 1, c1 - c0 + 1))
    else:
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / seg2, 0.0, 1.0)
    dist = np.sqrt((px - (ax + t * dx)) ** 2 + (py - (ay + t * dy)) ** 2)
    region = cov[r0 : r1 + 1, c0 : c1 + 1]
    np.maximum(region, np.clip(1.5 - dist, 0.0, 1.0), out=region)


def render_face(landmarks: np.ndarray, size: int = 64) -> np.ndarray:
    """Rasterise brows, eyes and lips as anti-aliased polylines.

    Coverage per pixel is clip(1.5 - distance_to_stroke, 0, 1); the
    image is 0.2 background plus 0.8 * coverage.  Jaw and nose points
    exist only for the motion features and are not drawn.
    """
    if landmarks.shape != (LANDMARK_COUNT, 2):
        raise ContractViolation(f"render_face: expected 73 x 2, got {landmarks.shape}")
    cov = np.zeros((size, size))
    pts = np.asarray(landmarks, dtype=np.float64) * (size - 1)
    for group, closed in _DRAWN_GROUPS:
        idx = range(group.start, group.stop)
        pairs = list(zip(idx[:-1], idx[1:]))
        if closed:
            pairs.append((group.stop - 1, group.start))
        for a, b in pairs:
            _draw_segment(cov, pts[a, 0], pts[a, 1], pts[b, 0], pts[b, 1])
    return 0.2 + 0.8 * cov


def _quantise(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_synthetic(config: SynthConfig) -> list[VideoSequence]:
    """Sample a corpus of schematic face videos.

    Each video runs its own RNG seeded from (config.seed, video index),
    so corpora agree across runs and video count changes do not shift
    earlier videos.  Expression states follow a Markov chain that stays
    put with ``stay_probability`` and otherwise jumps uniformly to one
    of the other four states.  Activations ramp by 1/3 per frame toward
    the current prototype; frame 0 starts settled.  Pixel planes are
    quantised to the u8 grid here, so storage round trips exactly.
    """
    config.validate()
    size = config.image_size
    videos = []
    for v in range(config.videos):
        rng = np.random.default_rng([config.seed, v])
        video_id = f"synth{v:04d}"
        frames = []
        state = int(rng.integers(5))
        intensities = PROTOTYPE_LABELS[state].astype(np.float64)
        for t in range(config.frames_per_video):
            if t > 0:
                if rng.random() >= config.stay_probability:
                    others = [s for s in range(5) if s != state]
                    state = others[int(rng.integers(4))]
                target = PROTOTYPE_LABELS[state].astype(np.float64)
                intensities = np.clip(
                    intensities + RAMP_STEP * (2.0 * target - 1.0), 0.0, 1.0
                )
            target_labels = PROTOTYPE_LABELS[state].copy()
            flips = rng.random(len(AU_ORDER)) < config.label_flip_noise
            labels = np.where(flips, 1 - target_labels, target_labels).astype(np.int8)

            lm = displaced_landmarks(intensities)
            lm = lm + rng.normal(0.0, config.landmark_jitter_sigma, lm.shape)
            lm = np.clip(lm, 0.0, 1.0).astype(np.float32)

            img = render_face(lm.astype(np.float64), size)
            img = img + rng.normal(0.0, config.pixel_noise_sigma, img.shape)
            gray = _quantise(img)[None]
            edge = _quantise(sobel_edge(gray)[0])[None]
            frames.append(FrameSample(video_id, t, gray, edge, lm, labels))
        videos.append(VideoSequence(video_id, frames))
    return videos


# ---------------------------------------------------------------------------
# binary corpus format
#
# magic "AUC1", version u16, height u16, width u16, video count u32, then
# per video: id (u16 length + utf8), frame count u32, then per frame:
# gray u8*H*W, edge u8*H*W, landmarks 146 * f32, labels 8 * i8.
# All integers and floats little endian.

CORPUS_MAGIC = b"AUC1"
CORPUS_VERSION = 1


def _corpus_file(path: Path) -> Path:
    return path if path.suffix == ".auc" else path / "corpus.auc"


def store_corpus(videos: list[VideoSequence], path) -> Path:
    """Write videos to one .auc file; a directory path gets corpus.auc."""
    if not videos:
        raise ContractViolation("store_corpus: no videos to store")
    target = _corpus_file(Path(path))
    target.parent.mkdir(parents=True, exist_ok=True)
    h, w = videos[0].frames[0].gray.shape[1:]
    buf = bytearray()
    buf += CORPUS_MAGIC
    buf += struct.pack("<HHHI", CORPUS_VERSION, h, w, len(videos))
    for video in videos:
        buf += pack_str(video.video_id)
        buf += struct.pack("<I", len(video))
        for fr in video.frames:
            if fr.gray.shape[1:] != (h, w):
                raise ContractViolation(
                    f"store_corpus: frame size {fr.gray.shape[1:]} != corpus size {(h, w)}"
                )
            buf += np.round(fr.gray[0] * 255.0).astype(np.uint8).tobytes()
            buf += np.round(fr.edge[0] * 255.0).astype(np.uint8).tobytes()
            buf += fr.landmarks.astype("<f4").tobytes()
            buf += fr.labels.astype(np.int8).tobytes()
    target.write_bytes(bytes(buf))
    return target


def _load_file(target: Path) -> list[VideoSequence]:
    r = ByteReader(target.read_bytes(), str(target))
    magic = r.take(4)
    if magic != CORPUS_MAGIC:
        raise FormatError(f"{target}: bad magic {magic!r}, expected {CORPUS_MAGIC!r}")
    version, h, w, count = r.unpack("<HHHI")
    if version != CORPUS_VERSION:
        raise FormatError(
            f"{target}: corpus version {version}, this reader supports {CORPUS_VERSION}"
        )
    if count == 0:
        raise EmptyCorpusError(f"{target}: corpus holds no videos")
    plane = h * w
    videos = []
    for _ in range(count):
        video_id = r.take_str()
        (n_frames,) = r.unpack("<I")
        frames = []
        for t in range(n_frames):
            gray = np.frombuffer(r.take(plane), np.uint8).reshape(1, h, w) / np.float32(255)
            edge = np.frombuffer(r.take(plane), np.uint8).reshape(1, h, w) / np.float32(255)
            lm = np.frombuffer(r.take(LANDMARK_COUNT * 2 * 4), "<f4").reshape(
                LANDMARK_COUNT, 2
            )
            labels = np.frombuffer(r.take(len(AU_ORDER)), np.int8).copy()
            if not np.isin(labels, (-1, 0, 1)).all():
                raise FormatError(
                    f"{target}: video {video_id!r} frame {t} has labels outside "
                    f"{{-1, 0, 1}}: {labels.tolist()}"
                )
            frames.append(
                FrameSample(video_id, t, gray.astype(np.float32), edge.astype(np.float32),
                            lm.copy(), labels)
            )
        videos.append(VideoSequence(video_id, frames))
    if not r.exhausted():
        raise FormatError(f"{target}: {r.remaining()} trailing bytes after last video")
    return videos


def load_corpus(path) -> list[VideoSequence]:
    """Read a corpus from a .auc file or from every .auc file in a directory."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"corpus path does not exist: {p}")
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix == ".auc")
        if not files:
            raise EmptyCorpusError(f"no .auc files in {p}")
        videos = []
        for f in files:
            videos.extend(_load_file(f))
        return videos
    return _load_file(p)


# ---------------------------------------------------------------------------
# label CSV


def read_label_csv(path) -> np.ndarray:
    """Read per-frame labels: one line per frame, 8 comma-separated values.

    Line order gives the frame order; there is no header and no frame
    column.  Returns a T x 8 int8 array.  Values outside {-1, 0, 1}
    are rejected with the offending line number.
    """
    p = Path(path)
    rows = []
    with p.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(AU_ORDER):
                raise FormatError(
                    f"{p}: line {lineno}: {len(parts)} fields, expected {len(AU_ORDER)}"
                )
            try:
                values = [int(x) for x in parts]
            except ValueError as exc:
                raise FormatError(f"{p}: line {lineno}: {exc}") from None
            for au, val in zip(AU_ORDER, values):
                if val not in (-1, 0, 1):
                    raise FormatError(
                        f"{p}: line {lineno}: {au} = {val} not in {{-1, 0, 1}}"
                    )
            rows.append(values)
    if not rows:
        raise FormatError(f"{p}: no label rows")
    return np.array(rows, dtype=np.int8)
