"""Speech/motion pairing, splits, standardisation and synthetic fixtures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import audio_features as af
from . import motion_io as mio

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------- standardisation

@dataclass
class NormalizationStats:
    """Per-dimension centre and max-abs scale; constant dims get scale 1."""

    mean: np.ndarray
    scale: np.ndarray
    labels: list[str] = field(default_factory=list)
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.mean.shape, dtype=bool)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if np.any(self.scale <= 0):
            raise ValueError("normalisation scales must be positive")

    @property
    def dim(self):
        return self.mean.shape[0]

    def _check(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-1] != self.dim:
            raise ValueError(f"frames have {frames.shape[-1]} dims, stats have {self.dim}")
        return frames

    def apply(self, frames):
        return (self._check(frames) - self.mean) / self.scale

    def invert(self, frames):
        return self._check(frames) * self.scale + self.mean

    def subset(self, sl):
        labels = self.labels[sl] if self.labels else []
        return NormalizationStats(self.mean[sl], self.scale[sl], labels, self.degenerate[sl])

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "labels": list(self.labels),
            "degenerate": self.degenerate.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["scale"], d.get("labels", []), d.get("degenerate"))


def fit_standardizer(train_frames, labels=None) -> NormalizationStats:
    x = np.asarray(train_frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DatasetError("cannot fit normalisation on an empty training set")
    mean = x.mean(axis=0)
    scale = np.abs(x - mean).max(axis=0)
    degenerate = scale <= 1e-12 * np.maximum(np.abs(mean), 1.0)
    scale = np.where(degenerate, 1.0, scale)
    return NormalizationStats(mean, scale, list(labels or []), degenerate)


def apply(stats: NormalizationStats, frames):
    return stats.apply(frames)


def invert(stats: NormalizationStats, frames):
    return stats.invert(frames)


def pose_and_velocity(positions):
    """[g_t, g_t - g_{t-1}] per frame, with a zero velocity on frame 0."""
    positions = np.asarray(positions, dtype=np.float64)
    vel = np.zeros_like(positions)
    vel[1:] = np.diff(positions, axis=0)
    return np.concatenate([positions, vel], axis=1)


def motion_labels(joint_names):
    pose = [f"{n}_{a}" for n in joint_names for a in "xyz"]
    return pose + [f"d_{p}" for p in pose]


# ---------------------------------------------------------------- manifest

@dataclass
class Entry:
    id: str
    audio_path: str
    motion_path: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[Entry]
    joint_groups: dict[str, list[str]] = field(default_factory=dict)
    hip_joint: str = ""
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest ids must be unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise DatasetError(f"entry {e.id!r}: split must be one of {SPLITS}, got {e.split!r}")

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def check_paths(self):
        for e in self.entries:
            for p in (e.audio_path, e.motion_path):
                if not self.resolve(p).exists():
                    raise DatasetError(f"entry {e.id!r}: missing file {self.resolve(p)}")

    def to_dict(self):
        return {
            "entries": [vars(e) for e in self.entries],
            "joint_groups": self.joint_groups,
            "hip_joint": self.hip_joint,
        }


def load_manifest(path, check=True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such manifest: {path}")
    try:
        doc = json.loads(path.read_text())
        entries = [Entry(**e) for e in doc["entries"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from None
    m = DatasetManifest(entries, doc.get("joint_groups", {}), doc.get("hip_joint", ""), path.parent)
    if check:
        m.check_paths()
    return m


def save_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")


def load_motion(path) -> mio.MotionSequence:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such motion file: {path}")
    if path.suffix.lower() == ".bvh":
        return mio.load_bvh_motion(path)
    return mio.read_motion_csv(path)


def load_pair(entry: Entry, feature_kind: str, root=".", fps: int = 20):
    """Features and motion for one entry, both at ``fps`` and equal length."""
    root = Path(root)
    audio_path = Path(entry.audio_path) if Path(entry.audio_path).is_absolute() else root / entry.audio_path
    motion_path = Path(entry.motion_path) if Path(entry.motion_path).is_absolute() else root / entry.motion_path
    if not audio_path.exists():
        raise DatasetError(f"entry {entry.id!r}: no such audio file {audio_path}")
    motion = load_motion(motion_path)
    try:
        motion = mio.resample_motion(motion, fps)
    except ValueError as exc:
        raise DatasetError(f"entry {entry.id!r}: {exc}") from None
    feats = af.extract(af.read_wav(audio_path), feature_kind, fps)
    n = min(feats.n_frames, motion.n_frames)
    return (
        af.FeatureSequence(feats.kind, feats.fps, feats.data[:n]),
        mio.MotionSequence(motion.fps, motion.joint_names, motion.positions[:n]),
    )


def load_split(manifest: DatasetManifest, split: str, feature_kind: str, fps: int = 20):
    return [load_pair(e, feature_kind, manifest.root, fps) for e in manifest.split(split)]


# ---------------------------------------------------------------- synthetic fixture

_JOINT_NAMES = [
    "Hips", "Spine", "Chest", "RightShoulder", "RightArm", "RightForeArm", "RightHand", "RightFinger",
    "LeftShoulder", "LeftArm", "LeftForeArm", "LeftHand",
]


@dataclass
class FixtureSpec:
    joints: int = 8
    seconds: float = 30.0
    seed: int = 0
    sample_rate: int = 16000
    motion_fps: int = 60


def _smooth_noise(rng, n, sigma, shape=()):
    x = rng.standard_normal((n,) + tuple(shape))
    y = gaussian_filter1d(x, sigma, axis=0, mode="reflect")
    return y / (y.std(axis=0) + 1e-12)


def _speech_plan(rng, seconds):
    """Syllables as (start, duration, amplitude, voiced) grouped into phrases."""
    sylls, phrases = [], []
    t = rng.uniform(0.1, 0.4)
    while t < seconds:
        phrase_end = min(t + rng.uniform(1.0, 3.0), seconds)
        phrases.append((t, phrase_end, rng.uniform(110.0, 220.0)))
        while t < phrase_end - 0.1:
            dur = rng.uniform(0.12, 0.3)
            sylls.append((t, dur, rng.uniform(0.35, 1.0), rng.random() > 0.15))
            t += dur + rng.uniform(0.0, 0.08)
        t = phrase_end + rng.uniform(0.25, 0.9)
    return sylls, phrases


def synthesize_fixture(spec: FixtureSpec):
    """Audio and BVH channel data whose motion is driven by the audio's energy.

    Speech is phrases of syllables: harmonic tones on a falling F0 contour,
    with some unvoiced noise bursts. Each joint rotation follows a smoothed
    energy envelope (per-channel gain and small lag); arm joints add ~3 Hz
    beat strokes whose amplitude tracks the envelope, plus seeded slow noise.
    """
    if spec.joints < 2:
        raise ValueError("fixture needs at least two joints")
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    n = int(round(spec.seconds * sr))
    t = np.arange(n) / sr
    sylls, phrases = _speech_plan(rng, spec.seconds)

    f0 = np.full(n, 150.0)
    for start, end, base in phrases:
        a, b = int(start * sr), min(int(end * sr), n)
        f0[a:b] = base * np.linspace(1.0, 0.8, b - a) * (1.0 + 0.03 * np.sin(2 * np.pi * 5.0 * t[a:b]))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    voiced_src = sum(np.sin(k * phase) / k for k in range(1, 6)) / 1.5
    noise_src = rng.uniform(-1.0, 1.0, n) * 0.6

    env = np.zeros(n)
    voicing = np.zeros(n)
    for start, dur, amp, voiced in sylls:
        a, b = int(start * sr), min(int((start + dur) * sr), n)
        if b <= a:
            continue
        env[a:b] += amp * np.hanning(b - a)
        voicing[a:b] = 1.0 if voiced else 0.0
    audio = env * (voicing * voiced_src + (1.0 - voicing) * noise_src)
    audio += 0.002 * rng.standard_normal(n)
    audio *= 0.8 / max(np.abs(audio).max(), 1e-9)

    # motion drivers at the motion rate
    fps = spec.motion_fps
    n_frames = int(spec.seconds * fps)
    idx = np.minimum((np.arange(n_frames) / fps * sr).astype(int), n - 1)
    drive = gaussian_filter1d(env, 0.004 * sr)[idx]
    drive = gaussian_filter1d(drive, 0.06 * fps)
    drive /= max(drive.max(), 1e-9)
    beat_amp = gaussian_filter1d(drive, 0.05 * fps)
    tt = np.arange(n_frames) / fps

    J = spec.joints
    names = (_JOINT_NAMES + [f"Joint{k}" for k in range(len(_JOINT_NAMES), J)])[:J]
    joints = [mio.Joint(names[0], None, np.array([0.0, 95.0, 0.0]),
                        ["Xposition", "Yposition", "Zposition", "Zrotation", "Xrotation", "Yrotation"])]
    for j in range(1, J):
        if j < 3:
            off = np.array([0.0, rng.uniform(12.0, 18.0), 0.0])
        else:
            off = np.array([rng.uniform(10.0, 26.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)])
        joints.append(mio.Joint(names[j], j - 1, off, ["Zrotation", "Xrotation", "Yrotation"]))
    skeleton = mio.Skeleton(joints, {J - 1: np.array([8.0, 0.0, 0.0])})

    cols = []
    slow = _smooth_noise(rng, n_frames, 0.6 * fps, (J, 3))
    root_noise = _smooth_noise(rng, n_frames, 0.8 * fps, (3,))
    cols.append(root_noise[:, 0] * 1.0)
    cols.append(root_noise[:, 1] * 0.5 + 1.5 * drive)
    cols.append(root_noise[:, 2] * 1.0)
    for j in range(J):
        arm = j >= 3
        gain = rng.uniform(5.0, 15.0, 3) * rng.choice([-1.0, 1.0], 3) if arm else rng.uniform(-6.0, 6.0, 3)
        base = rng.uniform(-20.0, 20.0, 3) if arm else rng.uniform(-3.0, 3.0, 3)
        lag = int(rng.integers(0, max(int(0.1 * fps), 1) + 1))
        d = np.concatenate([np.full(lag, drive[0]), drive[: n_frames - lag]])
        # beat strokes: amplitude follows the speech envelope
        freq = rng.uniform(2.4, 3.6, 3)
        phase = rng.uniform(0.0, 2 * np.pi, 3)
        for c in range(3):
            beat = (10.0 if arm else 0.0) * beat_amp * np.sin(2 * np.pi * freq[c] * tt + phase[c])
            cols.append(base[c] + gain[c] * d + beat + slow[:, j, c])
    frames = np.stack(cols, axis=1)
    signal = af.AudioSignal(audio, sr)
    return signal, skeleton, mio.ChannelData(1.0 / fps, frames)


def generate_fixture(out_dir, spec: FixtureSpec, name="fixture"):
    """Write ``<name>.wav`` and ``<name>.bvh``; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    signal, skeleton, data = synthesize_fixture(spec)
    wav, bvh = out_dir / f"{name}.wav", out_dir / f"{name}.bvh"
    af.write_wav(wav, signal)
    bvh.write_text(mio.format_bvh(skeleton, data))
    return wav, bvh


def default_joint_groups(joint_names):
    groups = {"all": list(joint_names)}
    elbows = [n for n in joint_names if n.endswith("ForeArm")]
    wrists = [n for n in joint_names if n.endswith("Hand")]
    if elbows:
        groups["elbows"] = elbows
    if wrists:
        groups["wrists"] = wrists
    return groups


def make_fixture_dataset(
    out_dir,
    joints=8,
    seed=0,
    train_clips=6,
    train_seconds=30.0,
    val_clips=1,
    val_seconds=30.0,
    test_clips=1,
    test_seconds=30.0,
    sample_rate=16000,
    motion_fps=60,
) -> Path:
    """Generate a whole fixture corpus plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    k = 0
    for split, count, secs in (("train", train_clips, train_seconds), ("val", val_clips, val_seconds),
                               ("test", test_clips, test_seconds)):
        for i in range(count):
            name = f"{split}_{i:03d}"
            spec = FixtureSpec(joints, secs, seed * 1000 + k, sample_rate, motion_fps)
            wav, bvh = generate_fixture(out_dir, spec, name)
            entries.append(Entry(name, wav.name, bvh.name, split))
            k += 1
    names = mio.read_bvh(out_dir / entries[0].motion_path)[0].names
    manifest = DatasetManifest(entries, default_joint_groups(names), names[0], out_dir)
    path = out_dir / "manifest.json"
    save_manifest(manifest, path)
    return path
