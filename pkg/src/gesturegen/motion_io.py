"""BVH parsing, forward kinematics and motion matrices.

Positions are kept as a (frames, 3*J) matrix laid out [x1, y1, z1, x2, ...]
in the BVH's own units (treated as centimetres).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

ROTATION_CHANNELS = ("Xrotation", "Yrotation", "Zrotation")
POSITION_CHANNELS = ("Xposition", "Yposition", "Zposition")
VALID_CHANNELS = ROTATION_CHANNELS + POSITION_CHANNELS


class BVHParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedHeaderError(BVHParseError):
    pass


class ChannelCountError(BVHParseError):
    pass


class FrameValueError(BVHParseError):
    pass


class FrameCountError(BVHParseError):
    pass


class MotionFormatError(ValueError):
    pass


@dataclass
class Joint:
    name: str
    parent: int | None
    offset: np.ndarray
    channels: list[str]


@dataclass
class Skeleton:
    joints: list[Joint]
    end_sites: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        roots = [j for j in self.joints if j.parent is None]
        if len(roots) != 1:
            raise ValueError(f"skeleton needs exactly one root, got {len(roots)}")
        for i, j in enumerate(self.joints):
            if j.parent is not None and not (0 <= j.parent < i):
                raise ValueError(f"joint {j.name!r} has parent {j.parent}, not topologically ordered")
            if len(set(j.channels)) != len(j.channels):
                raise ValueError(f"joint {j.name!r} repeats a channel")
            bad = [c for c in j.channels if c not in VALID_CHANNELS]
            if bad:
                raise ValueError(f"joint {j.name!r} has unknown channels {bad}")

    @property
    def names(self):
        return [j.name for j in self.joints]

    @property
    def parents(self):
        return np.array([-1 if j.parent is None else j.parent for j in self.joints], dtype=np.int64)

    @property
    def channel_count(self):
        return sum(len(j.channels) for j in self.joints)

    def channel_slices(self):
        out, start = [], 0
        for j in self.joints:
            out.append(slice(start, start + len(j.channels)))
            start += len(j.channels)
        return out


@dataclass
class ChannelData:
    frame_time: float
    frames: np.ndarray


@dataclass
class MotionSequence:
    fps: int
    joint_names: list[str]
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise ValueError("positions must be a (frames, 3*J) matrix")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.positions.shape[1] != 3 * len(self.joint_names):
            raise ValueError(
                f"{self.positions.shape[1]} columns for {len(self.joint_names)} joints"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")

    @property
    def n_frames(self):
        return self.positions.shape[0]

    @property
    def n_joints(self):
        return len(self.joint_names)

    def joints3(self):
        """View as (frames, J, 3)."""
        return self.positions.reshape(self.n_frames, self.n_joints, 3)

    def with_positions(self, positions):
        return MotionSequence(self.fps, list(self.joint_names), positions)


# ---------------------------------------------------------------- parsing

def _tokens(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        for tok in line.split():
            yield lineno, tok


def parse_bvh(text: str) -> tuple[Skeleton, ChannelData]:
    lines = text.splitlines()
    try:
        motion_idx = next(i for i, ln in enumerate(lines) if ln.strip().upper() == "MOTION")
    except StopIteration:
        raise MalformedHeaderError("missing MOTION section") from None
    hierarchy = "\n".join(lines[:motion_idx])
    toks = list(_tokens(hierarchy))
    if not toks or toks[0][1].upper() != "HIERARCHY":
        raise MalformedHeaderError("missing HIERARCHY keyword", toks[0][0] if toks else 1)

    joints: list[Joint] = []
    end_sites: dict[int, np.ndarray] = {}
    pos = 1

    def expect(word):
        nonlocal pos
        if pos >= len(toks):
            raise MalformedHeaderError(f"unexpected end of hierarchy, expected {word!r}", motion_idx)
        ln, tok = toks[pos]
        if tok != word:
            raise MalformedHeaderError(f"expected {word!r}, found {tok!r}", ln)
        pos += 1

    def number():
        nonlocal pos
        if pos >= len(toks):
            raise MalformedHeaderError("unexpected end of hierarchy", motion_idx)
        ln, tok = toks[pos]
        try:
            val = float(tok)
        except ValueError:
            raise MalformedHeaderError(f"expected a number, found {tok!r}", ln) from None
        pos += 1
        return val

    def offset():
        expect("OFFSET")
        return np.array([number(), number(), number()])

    def parse_joint(parent):
        nonlocal pos
        pos += 1  # ROOT / JOINT keyword
        if pos >= len(toks):
            raise MalformedHeaderError("joint without a name", motion_idx)
        name = toks[pos][1]
        pos += 1
        expect("{")
        off = offset()
        ln, tok = toks[pos] if pos < len(toks) else (motion_idx, "")
        if tok != "CHANNELS":
            raise MalformedHeaderError(f"expected 'CHANNELS' for joint {name!r}", ln)
        pos += 1
        n = number()
        if n != int(n) or n < 0:
            raise ChannelCountError(f"bad channel count {n} for joint {name!r}", ln)
        chans = []
        for _ in range(int(n)):
            if pos >= len(toks):
                raise ChannelCountError(f"joint {name!r} declares {int(n)} channels", ln)
            cln, c = toks[pos]
            if c not in VALID_CHANNELS:
                raise ChannelCountError(
                    f"joint {name!r} declares {int(n)} channels but {c!r} is not a channel name", cln
                )
            chans.append(c)
            pos += 1
        if len(set(chans)) != len(chans):
            raise ChannelCountError(f"joint {name!r} repeats a channel", ln)
        idx = len(joints)
        joints.append(Joint(name, parent, off, chans))
        while pos < len(toks):
            ln, tok = toks[pos]
            if tok in ("JOINT",):
                parse_joint(idx)
            elif tok == "End":
                pos += 1
                expect("Site")
                expect("{")
                end_sites[idx] = offset()
                expect("}")
            elif tok == "}":
                pos += 1
                return
            else:
                raise MalformedHeaderError(f"unexpected token {tok!r}", ln)
        raise MalformedHeaderError(f"unterminated joint {name!r}", motion_idx)

    if pos >= len(toks) or toks[pos][1] != "ROOT":
        raise MalformedHeaderError("expected ROOT", toks[pos][0] if pos < len(toks) else motion_idx)
    parse_joint(None)
    if pos != len(toks):
        raise MalformedHeaderError(f"trailing token {toks[pos][1]!r} after root", toks[pos][0])

    skeleton = Skeleton(joints, end_sites)

    # MOTION block
    i = motion_idx + 1
    frames_decl = frame_time = None
    while i < len(lines) and (frames_decl is None or frame_time is None):
        s = lines[i].strip()
        i += 1
        if not s:
            continue
        key, _, val = s.partition(":")
        key = key.strip().lower()
        try:
            if key == "frames":
                frames_decl = int(val)
            elif key == "frame time":
                frame_time = float(val)
            else:
                raise MalformedHeaderError(f"unexpected line {s!r} in MOTION header", i)
        except ValueError as exc:
            if isinstance(exc, BVHParseError):
                raise
            raise MalformedHeaderError(f"bad value in {s!r}", i) from None
    if frames_decl is None or frame_time is None:
        raise MalformedHeaderError("MOTION section lacks Frames / Frame Time", i)

    width = skeleton.channel_count
    rows = []
    for lineno in range(i + 1, len(lines) + 1):
        s = lines[lineno - 1].split()
        if not s:
            continue
        if len(s) != width:
            raise ChannelCountError(f"frame has {len(s)} values, skeleton has {width} channels", lineno)
        try:
            rows.append([float(v) for v in s])
        except ValueError:
            bad = next(v for v in s if not _is_float(v))
            raise FrameValueError(f"non-numeric frame value {bad!r}", lineno) from None
    if len(rows) != frames_decl:
        raise FrameCountError(f"frame count mismatch: header says {frames_decl}, found {len(rows)}", i)
    frames = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return skeleton, ChannelData(frame_time, frames)


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_bvh(path) -> tuple[Skeleton, ChannelData]:
    return parse_bvh(Path(path).read_text())


def format_bvh(skeleton: Skeleton, data: ChannelData, precision: int = 6) -> str:
    out = ["HIERARCHY"]
    children = {i: [] for i in range(len(skeleton.joints))}
    for i, j in enumerate(skeleton.joints):
        if j.parent is not None:
            children[j.parent].append(i)

    def emit(i, depth):
        j = skeleton.joints[i]
        pad = "\t" * depth
        out.append(f"{pad}{'ROOT' if j.parent is None else 'JOINT'} {j.name}")
        out.append(pad + "{")
        out.append(f"{pad}\tOFFSET {' '.join(f'{v:.{precision}f}' for v in j.offset)}")
        out.append(f"{pad}\tCHANNELS {len(j.channels)} {' '.join(j.channels)}".rstrip())
        for c in children[i]:
            emit(c, depth + 1)
        if i in skeleton.end_sites:
            out.append(f"{pad}\tEnd Site")
            out.append(pad + "\t{")
            out.append(f"{pad}\t\tOFFSET {' '.join(f'{v:.{precision}f}' for v in skeleton.end_sites[i])}")
            out.append(pad + "\t}")
        out.append(pad + "}")

    emit(0, 0)
    out.append("MOTION")
    out.append(f"Frames: {len(data.frames)}")
    out.append(f"Frame Time: {data.frame_time:.8f}")
    for row in data.frames:
        out.append(" ".join(f"{v:.{precision}f}" for v in row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- kinematics

def axis_rotation(axis: str, angle_rad):
    """Right-handed rotation matrices about a principal axis; broadcasts over angles."""
    a = np.asarray(angle_rad, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    if axis == "X":
        m = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == "Y":
        m = [[c, z, s], [z, o, z], [-s, z, c]]
    elif axis == "Z":
        m = [[c, -s, z], [s, c, z], [z, z, o]]
    else:
        raise ValueError(axis)
    return np.moveaxis(np.array(m), (0, 1), (-2, -1))


def _local_transforms(skeleton: Skeleton, frames: np.ndarray):
    n = frames.shape[0]
    n_joints = len(skeleton.joints)
    rot = np.broadcast_to(np.eye(3), (n, n_joints, 3, 3)).copy()
    trans = np.empty((n, n_joints, 3))
    for j, (joint, sl) in enumerate(zip(skeleton.joints, skeleton.channel_slices())):
        vals = frames[:, sl]
        trans[:, j] = joint.offset
        for k, ch in enumerate(joint.channels):
            if ch in POSITION_CHANNELS:
                trans[:, j, POSITION_CHANNELS.index(ch)] += vals[:, k]
            else:
                # intrinsic composition in file order: R = R_c1 @ R_c2 @ ...
                rot[:, j] = rot[:, j] @ axis_rotation(ch[0], np.deg2rad(vals[:, k]))
    return rot, trans


def forward_kinematics(skeleton: Skeleton, channel_row) -> np.ndarray:
    """Global positions (3*J,) for one frame of channel values."""
    row = np.asarray(channel_row, dtype=np.float64)
    if row.shape != (skeleton.channel_count,):
        raise ValueError(f"channel row has {row.shape} values, skeleton expects {skeleton.channel_count}")
    return forward_kinematics_frames(skeleton, row[None, :])[0]


def forward_kinematics_frames(skeleton: Skeleton, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != skeleton.channel_count:
        raise ValueError(f"frames must be (F, {skeleton.channel_count})")
    rot, trans = _local_transforms(skeleton, frames)
    pos = kernels.fk_chain(skeleton.parents, rot, trans)
    return pos.reshape(frames.shape[0], -1)


def to_motion_sequence(skeleton: Skeleton, data: ChannelData) -> MotionSequence:
    if not data.frame_time > 0:
        raise ValueError(f"frame_time must be positive, got {data.frame_time}")
    fps = int(round(1.0 / data.frame_time))
    return MotionSequence(fps, skeleton.names, forward_kinematics_frames(skeleton, data.frames))


def load_bvh_motion(path) -> MotionSequence:
    return to_motion_sequence(*read_bvh(path))


# ---------------------------------------------------------------- transforms

def resample_motion(m: MotionSequence, target_fps: int) -> MotionSequence:
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    if m.fps % target_fps:
        raise ValueError(f"cannot decimate {m.fps} fps to {target_fps} fps: non-integer ratio")
    step = m.fps // target_fps
    return MotionSequence(target_fps, list(m.joint_names), m.positions[::step].copy())


def hip_center(m: MotionSequence, hip_joint: int = 0) -> MotionSequence:
    if not 0 <= hip_joint < m.n_joints:
        raise IndexError(f"hip joint {hip_joint} out of range for {m.n_joints} joints")
    p = m.joints3()
    centred = p - p[:, hip_joint : hip_joint + 1, :]
    return m.with_positions(centred.reshape(m.n_frames, -1))


# ---------------------------------------------------------------- CSV

def motion_header(joint_names):
    return ",".join(f"{n}_{a}" for n in joint_names for a in "xyz")


def write_motion_csv(m: MotionSequence, path) -> None:
    if m.n_frames == 0:
        raise MotionFormatError("no frames")
    lines = [f"# fps={m.fps}", motion_header(m.joint_names)]
    lines += [",".join(repr(float(v)) for v in row) for row in m.positions]
    Path(path).write_text("\n".join(lines) + "\n")


def read_motion_csv(path) -> MotionSequence:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) < 2 or not lines[0].startswith("#"):
        raise MotionFormatError(f"{path}: missing '# fps=<int>' line")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].split() if "=" in kv)
    try:
        fps = int(meta["fps"])
    except (KeyError, ValueError):
        raise MotionFormatError(f"{path}: bad fps header {lines[0]!r}") from None
    cols = lines[1].split(",")
    if len(cols) % 3:
        raise MotionFormatError(f"{path}: header has {len(cols)} columns, not a multiple of 3")
    names = [c[:-2] for c in cols[::3]]
    if motion_header(names) != lines[1]:
        raise MotionFormatError(f"{path}: header columns must be <joint>_x,<joint>_y,<joint>_z")
    rows = []
    for k, ln in enumerate(lines[2:], start=3):
        vals = ln.split(",")
        if len(vals) != len(cols):
            raise MotionFormatError(f"{path}: ragged row at line {k} ({len(vals)} of {len(cols)} values)")
        rows.append([float(v) for v in vals])
    if not rows:
        raise MotionFormatError(f"{path}: no frames")
    return MotionSequence(fps, names, np.array(rows))


def joint_index(m_or_names, name) -> int:
    names = m_or_names.joint_names if isinstance(m_or_names, MotionSequence) else list(m_or_names)
    try:
        return names.index(name)
    except ValueError:
        raise KeyError(f"no joint named {name!r}") from None
