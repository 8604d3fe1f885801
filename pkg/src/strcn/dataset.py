"""Sequence and landmark containers, on-disk loaders and the synthetic face generator.

On-disk layout
--------------
* manifest CSV, one row per sequence: ``seq_dir,landmark_file,subject_id,label_index``
  (an optional fifth ``fps`` column is accepted; a header row is optional).
  Relative paths resolve against the manifest's directory.
* a sequence directory holds one image per frame; frames are taken in
  lexicographic filename order.
* landmark CSV, one row per frame: ``xl,yl,xr,yr,x1,y1,...,x68,y68``.
* optional ``classes.csv`` next to the manifest: ``index,name`` rows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

N_LANDMARKS = 68
IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg"}
PathLike = Union[str, Path]


@dataclass
class FrameSequence:
    """One labeled clip: ``frames`` is T x H x W x C with intensities in [0, 1]."""

    frames: np.ndarray
    fps: float
    subject_id: str
    label: int
    source_id: str
    frame_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise ValueError(f"frames must be T x H x W x C, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if frames.shape[3] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {frames.shape[3]}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite intensities")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("frame intensities must lie in [0, 1]")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        self.frames = frames
        self.label = int(self.label)
        self.subject_id = str(self.subject_id)
        if self.frame_indices is None:
            self.frame_indices = np.arange(frames.shape[0])
        else:
            self.frame_indices = np.asarray(self.frame_indices, dtype=int)
            if len(self.frame_indices) != frames.shape[0]:
                raise ValueError("frame_indices length must equal the frame count")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.frames.shape[1:]


@dataclass
class LandmarkTrack:
    """Per-frame eye centers (T x 2 x 2, left then right) and 68 control points (T x 68 x 2).

    Coordinates are (x, y) in pixels.
    """

    eyes: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.eyes = np.asarray(self.eyes, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.eyes.ndim != 3 or self.eyes.shape[1:] != (2, 2):
            raise ValueError(f"eyes must be T x 2 x 2, got {self.eyes.shape}")
        if self.points.ndim != 3 or self.points.shape[1:] != (N_LANDMARKS, 2):
            raise ValueError(f"points must be T x {N_LANDMARKS} x 2, got {self.points.shape}")
        if len(self.eyes) != len(self.points):
            raise ValueError("eye and point tracks differ in length")
        if not (np.all(np.isfinite(self.eyes)) and np.all(np.isfinite(self.points))):
            raise ValueError("landmark coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "LandmarkTrack":
        return LandmarkTrack(self.eyes[indices], self.points[indices])


@dataclass
class ManifestEntry:
    seq_dir: Path
    landmark_file: Path
    subject_id: str
    label: int
    fps: Optional[float] = None


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    class_names: List[str]

    def __post_init__(self):
        for e in self.entries:
            if not 0 <= e.label < self.n_classes:
                raise ValueError(f"label {e.label} outside [0, {self.n_classes})")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def subjects(self) -> List[str]:
        return [e.subject_id for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    def __len__(self) -> int:
        return len(self.entries)


# loading --------------------------------------------------------------------------


def _to_unit(img: Image.Image) -> np.ndarray:
    mode = img.mode
    if mode in ("1", "L", "P"):
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    elif mode.startswith("I;16") or mode == "I":
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif mode == "F":
        arr = np.asarray(img, dtype=np.float64)
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr if arr.ndim == 3 else arr[..., None]


def list_frames(directory: PathLike) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"missing sequence directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no image frames in {d}")
    return files


def load_sequence(directory: PathLike, entry: ManifestEntry, fps: float = 100.0) -> FrameSequence:
    frames = []
    for path in list_frames(directory):
        try:
            with Image.open(path) as img:
                arr = _to_unit(img)
        except OSError as exc:
            raise ValueError(f"unreadable image {path}: {exc}") from exc
        if frames and arr.shape != frames[0].shape:
            raise ValueError(
                f"inconsistent frame dimensions in {directory}: {arr.shape} vs {frames[0].shape}"
            )
        frames.append(arr)
    return FrameSequence(
        frames=np.clip(np.stack(frames), 0.0, 1.0),
        fps=entry.fps or fps,
        subject_id=entry.subject_id,
        label=entry.label,
        source_id=Path(directory).name,
    )


def load_landmarks(path: PathLike, expected_T: int) -> LandmarkTrack:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: non-numeric coordinate")
            if len(vals) != 4 + 2 * N_LANDMARKS:
                raise ValueError(
                    f"{path}:{lineno}: expected {4 + 2 * N_LANDMARKS} columns "
                    f"(2 eye centers + {N_LANDMARKS} points), got {len(vals)}"
                )
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}:{lineno}: non-finite coordinate")
            rows.append(vals)
    if len(rows) != expected_T:
        raise ValueError(f"{path}: {len(rows)} landmark rows for {expected_T} frames")
    arr = np.array(rows)
    return LandmarkTrack(eyes=arr[:, :4].reshape(-1, 2, 2), points=arr[:, 4:].reshape(-1, N_LANDMARKS, 2))


def write_landmarks(track: LandmarkTrack, path: PathLike) -> None:
    header = ["xl", "yl", "xr", "yr"] + [f"{a}{i}" for i in range(1, N_LANDMARKS + 1) for a in "xy"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for eyes, pts in zip(track.eyes, track.points):
            w.writerow([repr(float(v)) for v in np.concatenate([eyes.ravel(), pts.ravel()])])


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "seq_dir":
                continue
            if len(row) not in (4, 5):
                raise ValueError(f"{path}:{lineno}: expected seq_dir,landmark_file,subject_id,label_index")
            seq_dir, lm, subject, label = (c.strip() for c in row[:4])
            fps = float(row[4]) if len(row) == 5 and row[4].strip() else None
            e = ManifestEntry(base / seq_dir, base / lm, subject, int(label), fps)
            if not e.seq_dir.is_dir():
                raise FileNotFoundError(f"{path}:{lineno}: missing sequence directory {e.seq_dir}")
            if not e.landmark_file.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: missing landmark file {e.landmark_file}")
            entries.append(e)
    classes_file = base / "classes.csv"
    if classes_file.is_file():
        with open(classes_file, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and r[0].strip().isdigit()]
        names = [r[1] for r in sorted(rows, key=lambda r: int(r[0]))]
    else:
        n = max((e.label for e in entries), default=-1) + 1
        names = [f"class_{k}" for k in range(n)]
    return DatasetManifest(entries, names)


def load_dataset(manifest: DatasetManifest, fps: float = 100.0):
    sequences, tracks = [], []
    for e in manifest.entries:
        seq = load_sequence(e.seq_dir, e, fps)
        sequences.append(seq)
        tracks.append(load_landmarks(e.landmark_file, seq.T))
    return sequences, tracks


def write_dataset(root: PathLike, manifest: DatasetManifest, sequences: Sequence[FrameSequence],
                  tracks: Sequence[LandmarkTrack]) -> Path:
    """Write frames as 16-bit PNGs plus landmark CSVs; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for seq, track in zip(sequences, tracks):
        rel = Path("sequences") / seq.source_id
        d = root / rel
        d.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            q = np.round(frame * 65535.0).astype(np.uint16)
            if q.shape[2] == 1:
                Image.fromarray(q[..., 0]).save(d / f"frame_{t:04d}.png")
            else:
                Image.fromarray((frame * 255 + 0.5).astype(np.uint8)).save(d / f"frame_{t:04d}.png")
        lm = Path("landmarks") / f"{seq.source_id}.csv"
        (root / lm).parent.mkdir(parents=True, exist_ok=True)
        write_landmarks(track, root / lm)
        rows.append([rel.as_posix(), lm.as_posix(), seq.subject_id, seq.label, repr(seq.fps)])
    mpath = root / "manifest.csv"
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_dir", "landmark_file", "subject_id", "label_index", "fps"])
        w.writerows(rows)
    with open(root / "classes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "name"])
        w.writerows(enumerate(manifest.class_names))
    return mpath


# synthetic faces ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 6
    seqs_per_subject: int = 10
    T: int = 30
    H: int = 96
    W: int = 96
    classes: int = 3
    motion_amplitude_px: float = 2.0
    seed: int = 0
    fps: float = 100.0

    def validate(self) -> None:
        for name in ("n_subjects", "seqs_per_subject", "T", "H", "W", "classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.motion_amplitude_px < 0:
            raise ValueError("motion_amplitude_px must be >= 0")


def face_layout() -> np.ndarray:
    """68 landmark positions in face units: origin between the eyes, unit = inter-ocular distance."""
    pts = []
    for phi in np.linspace(0.0, np.pi, 17):  # jaw, left to right via the chin
        pts.append((-math.cos(phi), 0.1 + 1.5 * math.sin(phi)))
    for u in np.linspace(-0.85, -0.15, 5):  # left brow
        pts.append((u, -0.35 - 0.12 * math.cos((u + 0.5) * 3)))
    for u in np.linspace(0.15, 0.85, 5):  # right brow
        pts.append((u, -0.35 - 0.12 * math.cos((u - 0.5) * 3)))
    for v in np.linspace(0.08, 0.55, 4):  # nose bridge
        pts.append((0.0, v))
    for u in np.linspace(-0.2, 0.2, 5):  # nostrils
        pts.append((u, 0.62 + 0.05 * abs(u)))
    for cx in (-0.5, 0.5):  # eyes
        for a in np.linspace(0, 2 * np.pi, 6, endpoint=False):
            pts.append((cx - 0.18 * math.cos(a), -0.07 * math.sin(a)))
    for a in np.linspace(0, 2 * np.pi, 12, endpoint=False):  # outer lip
        pts.append((-0.4 * math.cos(a), 1.0 - 0.16 * math.sin(a)))
    for a in np.linspace(0, 2 * np.pi, 8, endpoint=False):  # inner lip
        pts.append((-0.25 * math.cos(a), 1.0 - 0.06 * math.sin(a)))
    out = np.array(pts)
    assert out.shape == (N_LANDMARKS, 2)
    return out


# (u, v) face-unit centers of the moving patch, cycled over classes
CLASS_REGIONS = ((-0.5, 0.35), (0.35, 0.4), (0.0, 1.0), (-0.6, 1.3), (0.3, 1.35))


def _gauss(xx, yy, cx, cy, sx, sy):
    return np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2))


def _render_face(xx, yy, center, D, texture):
    cx, cy = center
    u = (xx - cx) / D
    v = (yy - cy) / D
    face = 1.0 / (1.0 + np.exp(-12.0 * (1.0 - np.hypot(u / 1.05, (v - 0.55) / 1.25))))
    img = 0.22 + 0.33 * face
    for freq, phase, amp, ang in texture:
        img += amp * face * np.sin(freq * (u * math.cos(ang) + v * math.sin(ang)) + phase)
    for ex in (-0.5, 0.5):
        img -= 0.28 * _gauss(u, v, ex, 0.0, 0.13, 0.07)
        img -= 0.15 * _gauss(u, v, ex, -0.38, 0.25, 0.05)
    img -= 0.08 * _gauss(u, v, 0.0, 0.62, 0.12, 0.06)
    img -= 0.22 * _gauss(u, v, 0.0, 1.0, 0.33, 0.07)
    return img


def _profile(T: int, apex: int) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)
    rise = np.sin(0.5 * np.pi * np.minimum(t / apex, 1.0)) ** 2
    tail = max(T - 1 - apex, 1)
    fall = np.cos(0.5 * np.pi * np.clip((t - apex) / tail, 0.0, 1.0)) ** 2
    return np.where(t <= apex, rise, 0.4 + 0.6 * fall)


def generate_synthetic_dataset(spec: SyntheticSpec):
    """Deterministic synthetic micro-expression corpus.

    Every subject gets a static face template (eyes, brows, nose, mouth and a
    smooth texture) at a slightly different position and scale. Each sequence
    adds a small bright patch in a class-specific facial region that translates
    along a class-specific direction, ramping from zero at the first frame to
    ``motion_amplitude_px`` at a random apex frame and partially back. The
    landmark track equals the template landmarks in every frame.

    Returns ``(manifest, sequences, tracks)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    layout = face_layout()
    yy, xx = np.mgrid[0:spec.H, 0:spec.W].astype(np.float64)
    sequences, tracks, entries = [], [], []
    C = spec.classes
    for s in range(spec.n_subjects):
        subject = f"s{s:02d}"
        D = 0.28 * spec.W * (1.0 + 0.04 * rng.standard_normal())
        center = (spec.W * 0.5 + 0.03 * spec.W * rng.standard_normal() + 0.1 * D,
                  spec.H * 0.3 + 0.02 * spec.H * rng.standard_normal())
        texture = [(rng.uniform(3.0, 7.0), rng.uniform(0, 2 * np.pi), 0.03, rng.uniform(0, np.pi))
                   for _ in range(3)]
        base = _render_face(xx, yy, center, D, texture)
        points = center + D * (layout + 0.015 * rng.standard_normal(layout.shape))
        eyes = np.array([[center[0] - 0.5 * D, center[1]], [center[0] + 0.5 * D, center[1]]])
        labels = (np.arange(spec.seqs_per_subject) + rng.integers(C)) % C
        labels = rng.permutation(labels)
        for k in range(spec.seqs_per_subject):
            label = int(labels[k])
            ru, rv = CLASS_REGIONS[label % len(CLASS_REGIONS)]
            ru += 0.05 * rng.standard_normal()
            rv += 0.05 * rng.standard_normal()
            theta = np.pi * label / max(C - 1, 1) + np.deg2rad(8.0) * rng.standard_normal()
            amp = 0.22 * (1.0 + 0.15 * rng.standard_normal())
            # the onset-to-apex timing is class specific too (early, middle, late, ...)
            centre = 0.3 + 0.4 * (label % C) / max(C - 1, 1)
            apex = int(round((centre + 0.05 * rng.uniform(-1, 1)) * (spec.T - 1)))
            apex = min(max(apex, 1), spec.T - 1)
            disp = spec.motion_amplitude_px * _profile(spec.T, apex)
            px = center[0] + D * ru
            py = center[1] + D * rv
            sig = 0.12 * D
            frames = np.empty((spec.T, spec.H, spec.W, 1))
            for t in range(spec.T):
                bx = px + disp[t] * math.cos(theta)
                by = py + disp[t] * math.sin(theta)
                frames[t, ..., 0] = base + amp * _gauss(xx, yy, bx, by, sig, sig)
            frames = np.clip(frames, 0.0, 1.0)
            source = f"{subject}_{k:03d}"
            sequences.append(FrameSequence(frames, spec.fps, subject, label, source))
            tracks.append(LandmarkTrack(np.repeat(eyes[None], spec.T, axis=0),
                                        np.repeat(points[None], spec.T, axis=0)))
            entries.append(ManifestEntry(Path("sequences") / source,
                                         Path("landmarks") / f"{source}.csv", subject, label, spec.fps))
    manifest = DatasetManifest(entries, [f"class_{c}" for c in range(C)])
    return manifest, sequences, tracks


# reports ---------------------------------------------------------------------------


def write_report(report, path: PathLike) -> Path:
    """Serialize a metrics report (anything with ``to_dict`` or a mapping) as JSON."""
    path = Path(path)
    payload = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path: PathLike) -> Dict:
    return json.loads(Path(path).read_text())
