"""Speech-to-motion systems: Aud2Pose, Aud2Motion and Aud2Repr2Pose.

Aud2Pose maps a window of 2C+1 feature frames to one pose (plus velocity).
Aud2Motion runs a causal GRU over whole sequences. Aud2Repr2Pose learns a
denoising autoencoder on [pose, velocity] frames (MotionE / MotionD), trains a
speech encoder (SpeechE, same network as Aud2Pose) to predict the bottleneck
code, and decodes SpeechE's output with MotionD at test time.

Networks train in float32 and run inference in float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics
from .audio_features import FeatureSequence
from .dataset import DatasetError, NormalizationStats, fit_standardizer, motion_labels, pose_and_velocity
from .motion_io import MotionSequence
from .neural_core import (
    Adam,
    CheckpointError,
    LayerSpec,
    Network,
    mse_loss,
    network_from_state,
    network_state,
)

log = logging.getLogger(__name__)

MODEL_KINDS = ("aud2pose", "aud2motion", "aud2repr2pose")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, batch, loss):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


@dataclass
class ModelConfig:
    model_kind: str = "aud2repr2pose"
    feature_kind: str = "mfcc"
    C: int = 30
    hidden: int = 256
    fc_layers: int = 3
    dropout: float = 0.1
    lr: float = 0.001
    batch_size: int = 2056
    epochs: int = 120
    bottleneck: int = 325
    chunk_len: int = 100
    noise_scale: float = 0.05
    predict_velocity: bool = True
    dae_batch_size: int = 128
    dae_epochs: int = 20
    dae_activation: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        for name in ("C", "hidden", "fc_layers", "batch_size", "bottleneck", "chunk_len",
                     "dae_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "dae_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.noise_scale < 0:
            raise ValueError("lr must be positive and noise_scale non-negative")
        if self.dae_activation not in ("linear", "relu"):
            raise ValueError("dae_activation must be linear or relu")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def full_config(model_kind="aud2repr2pose", dataset="japanese", **kw) -> ModelConfig:
    """Hyperparameters as published for the two corpora."""
    base = dict(model_kind=model_kind, hidden=256, fc_layers=3, dropout=0.1, lr=0.001, C=30,
                batch_size=2056, epochs=120, bottleneck=325, dae_batch_size=128, dae_epochs=20,
                noise_scale=0.05, chunk_len=100, predict_velocity=True)
    if model_kind == "aud2motion":
        base.update(epochs=500, predict_velocity=False)
    if dataset == "english":
        base.update(predict_velocity=False, bottleneck=118)
        if model_kind == "aud2motion":
            base.update(batch_size=256)
    elif dataset != "japanese":
        raise ValueError(f"unknown dataset preset {dataset!r}")
    base.update(kw)
    return ModelConfig(**base)


def desk_config(model_kind="aud2repr2pose", **kw) -> ModelConfig:
    """Small settings for minutes-long synthetic corpora on one CPU core."""
    base = dict(model_kind=model_kind, hidden=64, batch_size=128, epochs=30, bottleneck=16,
                dae_batch_size=128, dae_epochs=20)
    if model_kind == "aud2motion":
        base.update(batch_size=8, epochs=60, predict_velocity=False)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- network layouts

def speech_network_specs(in_dim, out_dim, cfg: ModelConfig, bidirectional=True, return_sequences=False):
    """FC blocks -> GRU -> linear output; batch norm and dropout between layers.

    The affine layers feeding batch norm carry no bias: batch norm's shift
    makes it redundant and its gradient identically zero.
    """
    h = cfg.hidden
    specs = []
    d = in_dim
    for _ in range(cfg.fc_layers):
        specs += [
            LayerSpec("affine", d, h, {"bias": False}),
            LayerSpec("batch_norm", h, h, {"batch_norm_momentum": 0.1}),
            LayerSpec("relu", h, h),
            LayerSpec("dropout", h, h, {"dropout_p": cfg.dropout}),
        ]
        d = h
    g_out = 2 * h if bidirectional else h
    specs += [
        LayerSpec("gru", h, g_out, {"gru_direction": "bidirectional" if bidirectional else "forward",
                                    "return_sequences": return_sequences}),
        LayerSpec("batch_norm", g_out, g_out, {"batch_norm_momentum": 0.1}),
        LayerSpec("dropout", g_out, g_out, {"dropout_p": cfg.dropout}),
        LayerSpec("linear_out", g_out, out_dim),
    ]
    return specs


def dae_specs(dim, bottleneck, activation="linear"):
    enc = [LayerSpec("affine", dim, bottleneck)]
    if activation == "relu":
        enc.append(LayerSpec("relu", bottleneck, bottleneck))
    dec = [LayerSpec("linear_out", bottleneck, dim)]
    return enc, dec


def as_float64(net: Network) -> Network:
    state = network_state(net)
    state["dtype"] = "float64"
    return network_from_state(state)


# ---------------------------------------------------------------- windows and chunks

@dataclass
class WindowedExample:
    input: np.ndarray
    target: np.ndarray


class WindowIndex:
    """Sliding windows over several sequences without materialising them.

    Each sequence is padded with C copies of its first and last frame; example
    k's window is ``padded[start[k] : start[k] + 2C + 1]``.
    """

    def __init__(self, arrays, C):
        self.C = C
        padded, starts, offset = [], [], 0
        for a in arrays:
            a = np.asarray(a)
            if len(a) == 0:
                raise ValueError("empty sequence")
            p = np.concatenate([np.repeat(a[:1], C, axis=0), a, np.repeat(a[-1:], C, axis=0)])
            padded.append(p)
            starts.append(offset + np.arange(len(a)))
            offset += len(p)
        self.padded = np.concatenate(padded)
        self.starts = np.concatenate(starts)
        self._span = np.arange(2 * C + 1)

    def __len__(self):
        return len(self.starts)

    def gather(self, idx):
        return self.padded[self.starts[idx][:, None] + self._span]


def build_windows(features: FeatureSequence, motion: MotionSequence, C: int = 30):
    if features.fps != motion.fps:
        raise ValueError(f"feature fps {features.fps} != motion fps {motion.fps}")
    n = min(features.n_frames, motion.n_frames)
    if n == 0:
        raise ValueError("empty sequence")
    win = WindowIndex([features.data[:n]], C)
    targets = pose_and_velocity(motion.positions[:n])
    return [WindowedExample(win.gather(np.array([t]))[0], targets[t]) for t in range(n)]


def chunk_for_training(pairs, chunk_len=100):
    """Non-overlapping chunks of ``chunk_len`` frames; short remainders are dropped."""
    out = []
    for feats, motion in pairs:
        n = min(feats.n_frames, motion.n_frames)
        for s in range(0, n - chunk_len + 1, chunk_len):
            out.append((
                FeatureSequence(feats.kind, feats.fps, feats.data[s : s + chunk_len]),
                motion.with_positions(motion.positions[s : s + chunk_len]),
            ))
    return out


def _truncate(pairs):
    out = []
    for f, m in pairs:
        if f.fps != m.fps:
            raise ValueError(f"feature fps {f.fps} != motion fps {m.fps}")
        n = min(f.n_frames, m.n_frames)
        if n == 0:
            raise ValueError("empty training pair")
        out.append((f.data[:n], m.positions[:n]))
    return out


# ---------------------------------------------------------------- training loop

def _run_epochs(net_step, n, batch_size, epochs, rng, label):
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = perm[start : start + batch_size]
            loss = net_step(idx)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            total += loss * len(idx)
        history.append(total / n)
        log.info("%s epoch %d/%d loss %.6f", label, epoch + 1, epochs, history[-1])
    return history


def _fit_network(net, batch_fn, n, batch_size, epochs, lr, rng, label):
    """Minimise MSE with Adam; returns (loss before training, per-epoch losses)."""
    opt = Adam(net.parameters(), lr=lr)

    def step(idx):
        x, y = batch_fn(idx)
        net.zero_grad()
        out = net.forward(x, train=True)
        loss, g = mse_loss(out, y)
        if np.isfinite(loss):
            net.backward(g)
            opt.step()
        return loss

    initial = _initial_loss(net, batch_fn, n, batch_size)
    return initial, _run_epochs(step, n, batch_size, epochs, rng, label)


def _initial_loss(net, batch_fn, n, batch_size):
    # train-mode pass without updates; batch-norm buffers are restored afterwards
    saved = [(layer, key, b.copy()) for _, layer, key, b in net.named_buffers()]
    dropout_state = net.rng.bit_generator.state
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x, y = batch_fn(idx)
        total += mse_loss(net.forward(x, train=True), y)[0] * len(idx)
    for layer, key, b in saved:
        layer.buffers[key] = b
    net.rng.bit_generator.state = dropout_state
    return total / n


# ---------------------------------------------------------------- trained artifacts

class SpeechModel:
    """A trained speech network with its normalisation (Aud2Pose, Aud2Motion or SpeechE)."""

    def __init__(self, kind, net, input_stats, output_stats, config, joint_names=None,
                 history=None, initial_loss=None):
        self.kind = kind
        self.net = net
        self.input_stats = input_stats
        self.output_stats = output_stats
        self.config = config
        self.joint_names = list(joint_names or [])
        self.history = list(history or [])
        self.initial_loss = initial_loss
        self._infer = None

    @property
    def final_loss(self):
        return self.history[-1] if self.history else self.initial_loss

    def inference_net(self):
        if self._infer is None:
            self._infer = as_float64(self.net).eval()
        return self._infer

    def to_state(self):
        norm = {"input": self.input_stats.to_dict(),
                "output": self.output_stats.to_dict() if self.output_stats is not None else None}
        meta = {"config": asdict(self.config), "joint_names": self.joint_names,
                "history": self.history, "initial_loss": self.initial_loss}
        return network_state(self.net, self.kind, norm, meta)

    @classmethod
    def from_state(cls, state):
        if state.get("model_kind") not in ("aud2pose", "aud2motion", "speeche"):
            raise CheckpointError(f"not a speech model checkpoint: {state.get('model_kind')!r}")
        net = network_from_state(state)
        norm, meta = state["normalization"], state["meta"]
        out = NormalizationStats.from_dict(norm["output"]) if norm.get("output") else None
        return cls(state["model_kind"], net, NormalizationStats.from_dict(norm["input"]), out,
                   ModelConfig.from_dict(meta["config"]), meta.get("joint_names"), meta.get("history"),
                   meta.get("initial_loss"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_state(), sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_state(_read_json(path))


class MotionAutoencoder:
    """MotionE / MotionD pair over standardised [pose, velocity] frames.

    With ``predict_velocity`` off the frames hold the pose only.
    """

    def __init__(self, encoder, decoder, stats, config, history=None, initial_loss=None, val_mse=None):
        self.encoder = encoder
        self.decoder = decoder
        self.stats = stats
        self.config = config
        self.history = list(history or [])
        self.initial_loss = initial_loss
        self.val_mse = val_mse
        self._enc64 = self._dec64 = None

    @property
    def bottleneck(self):
        return self.encoder.out_dim

    def encode(self, frames):
        """Standardised (N, 6J) frames -> (N, d) codes."""
        if self._enc64 is None:
            self._enc64 = as_float64(self.encoder).eval()
        return self._enc64.forward(np.asarray(frames, dtype=np.float64), train=False)

    def decode(self, z):
        if self._dec64 is None:
            self._dec64 = as_float64(self.decoder).eval()
        return self._dec64.forward(np.asarray(z, dtype=np.float64), train=False)

    def reconstruction_mse(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        return mse_loss(self.decode(self.encode(frames)), frames)[0]

    def encoder_state(self):
        meta = {"config": asdict(self.config), "history": self.history, "initial_loss": self.initial_loss,
                "val_mse": self.val_mse}
        return network_state(self.encoder, "motione", self.stats.to_dict(), meta)

    def decoder_state(self):
        return network_state(self.decoder, "motiond", self.stats.to_dict(), {"config": asdict(self.config)})

    def save(self, encoder_path, decoder_path):
        Path(encoder_path).write_text(json.dumps(self.encoder_state(), sort_keys=True))
        Path(decoder_path).write_text(json.dumps(self.decoder_state(), sort_keys=True))

    @classmethod
    def from_states(cls, enc_state, dec_state):
        if enc_state.get("model_kind") != "motione" or dec_state.get("model_kind") != "motiond":
            raise CheckpointError("expected a MotionE and a MotionD checkpoint")
        meta = enc_state["meta"]
        return cls(network_from_state(enc_state), network_from_state(dec_state),
                   NormalizationStats.from_dict(enc_state["normalization"]),
                   ModelConfig.from_dict(meta["config"]), meta.get("history"), meta.get("initial_loss"),
                   meta.get("val_mse"))

    @classmethod
    def load(cls, encoder_path, decoder_path):
        return cls.from_states(_read_json(encoder_path), _read_json(decoder_path))


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint document ({exc})") from None


# ---------------------------------------------------------------- normalisation

def fit_motion_stats(motions) -> NormalizationStats:
    """One set of [pose, velocity] statistics, fitted on training motion only."""
    frames = np.concatenate([pose_and_velocity(m.positions) for m in motions])
    return fit_standardizer(frames, motion_labels(motions[0].joint_names))


def motion_frames(stats: NormalizationStats, positions, velocity=True):
    """Standardised [pose, velocity] frames, or pose only without ``velocity``."""
    frames = stats.apply(pose_and_velocity(positions))
    return frames if velocity else frames[:, : positions.shape[1]]


def fit_feature_stats(features) -> NormalizationStats:
    return fit_standardizer(np.concatenate([f.data for f in features]))


def _rngs(seed):
    ss = np.random.SeedSequence(seed)
    init, shuffle, noise = ss.spawn(3)
    return int(init.generate_state(1)[0]), np.random.default_rng(shuffle), np.random.default_rng(noise)


# ---------------------------------------------------------------- Aud2Pose / SpeechE

def _train_windowed(kind, pairs, targets_fn, out_dim, config, input_stats, output_stats, joint_names):
    arrays = _truncate(pairs)
    feats = [input_stats.apply(f).astype(np.float32) for f, _ in arrays]
    targets = np.concatenate([targets_fn(m) for _, m in arrays]).astype(np.float32)
    windows = WindowIndex(feats, config.C)
    init_seed, shuffle_rng, _ = _rngs(config.seed)
    net = Network(speech_network_specs(feats[0].shape[1], out_dim, config, True, False), init_seed, np.float32)

    def batch(idx):
        return windows.gather(idx), targets[idx]

    initial, history = _fit_network(net, batch, len(windows), config.batch_size, config.epochs, config.lr,
                                    shuffle_rng, kind)
    return SpeechModel(kind, net, input_stats, output_stats, config, joint_names, history, initial)


def train_aud2pose(pairs, config: ModelConfig, motion_stats=None, feature_stats=None) -> SpeechModel:
    """Train the windowed baseline on (FeatureSequence, MotionSequence) training pairs."""
    motions = [m for _, m in pairs]
    mstats = motion_stats or fit_motion_stats(motions)
    fstats = feature_stats or fit_feature_stats([f for f, _ in pairs])
    n_pose = 3 * motions[0].n_joints
    width = 2 * n_pose if config.predict_velocity else n_pose

    def targets(pos):
        return mstats.apply(pose_and_velocity(pos))[:, :width]

    cfg = config.replace(model_kind="aud2pose")
    return _train_windowed("aud2pose", pairs, targets, width, cfg, fstats, mstats, motions[0].joint_names)


def _predict_windows(net, feats_std, C, batch=256):
    windows = WindowIndex([feats_std], C)
    outs = [net.forward(windows.gather(np.arange(s, min(s + batch, len(windows)))), train=False)
            for s in range(0, len(windows), batch)]
    return np.concatenate(outs)


def predict_aud2pose(model: SpeechModel, features: FeatureSequence) -> MotionSequence:
    out = _predict_windows(model.inference_net(), model.input_stats.apply(features.data), model.config.C)
    n_pose = 3 * len(model.joint_names)
    pose = model.output_stats.subset(slice(0, n_pose)).invert(out[:, :n_pose])
    return MotionSequence(features.fps, model.joint_names, pose)


def train_speech_encoder(pairs, dae: MotionAutoencoder, config: ModelConfig, feature_stats=None) -> SpeechModel:
    """SpeechE: windows of speech -> MotionE codes of [g_t, dg_t] (MotionE frozen)."""
    fstats = feature_stats or fit_feature_stats([f for f, _ in pairs])

    def targets(pos):
        return dae.encode(motion_frames(dae.stats, pos, dae.config.predict_velocity))

    joint_names = pairs[0][1].joint_names
    return _train_windowed("speeche", pairs, targets, dae.bottleneck, config, fstats, None, joint_names)


def predict_aud2repr2pose(speeche: SpeechModel, dae: MotionAutoencoder, features: FeatureSequence) -> MotionSequence:
    z = _predict_windows(speeche.inference_net(), speeche.input_stats.apply(features.data), speeche.config.C)
    frames = dae.decode(z)
    n_pose = 3 * len(speeche.joint_names)
    pose = dae.stats.subset(slice(0, n_pose)).invert(frames[:, :n_pose])
    return MotionSequence(features.fps, speeche.joint_names, pose)


# ---------------------------------------------------------------- Aud2Motion

def train_aud2motion(pairs, config: ModelConfig, motion_stats=None, feature_stats=None) -> SpeechModel:
    """Causal sequence model trained on fixed-length chunks; pose targets only."""
    motions = [m for _, m in pairs]
    mstats = motion_stats or fit_motion_stats(motions)
    fstats = feature_stats or fit_feature_stats([f for f, _ in pairs])
    cfg = config.replace(model_kind="aud2motion")
    n_pose = 3 * motions[0].n_joints
    pstats = mstats.subset(slice(0, n_pose))
    chunks = chunk_for_training(pairs, cfg.chunk_len)
    if not chunks:
        raise DatasetError(f"no training sequence reaches chunk_len={cfg.chunk_len}")
    x = np.stack([fstats.apply(f.data) for f, _ in chunks]).astype(np.float32)
    y = np.stack([pstats.apply(m.positions) for _, m in chunks]).astype(np.float32)
    init_seed, shuffle_rng, _ = _rngs(cfg.seed)
    net = Network(speech_network_specs(x.shape[2], n_pose, cfg, False, True), init_seed, np.float32)
    initial, history = _fit_network(net, lambda idx: (x[idx], y[idx]), len(x), cfg.batch_size, cfg.epochs,
                                    cfg.lr, shuffle_rng, "aud2motion")
    return SpeechModel("aud2motion", net, fstats, mstats, cfg, motions[0].joint_names, history, initial)


def predict_aud2motion(model: SpeechModel, features: FeatureSequence) -> MotionSequence:
    x = model.input_stats.apply(features.data)[None]
    out = model.inference_net().forward(x, train=False)[0]
    n_pose = 3 * len(model.joint_names)
    pose = model.output_stats.subset(slice(0, n_pose)).invert(out)
    return MotionSequence(features.fps, model.joint_names, pose)


# ---------------------------------------------------------------- denoising autoencoder

def corrupt(frames, noise_scale, per_dim_std, rng):
    """Additive zero-mean Gaussian noise, std = noise_scale * per-dimension std."""
    frames = np.asarray(frames)
    if noise_scale == 0:
        return frames.copy()
    std = noise_scale * np.asarray(per_dim_std, dtype=np.float64)
    return (frames + rng.standard_normal(frames.shape) * std).astype(frames.dtype)


def train_dae(motions, config: ModelConfig, val_motions=None, stats=None) -> MotionAutoencoder:
    stats = stats or fit_motion_stats(motions)
    vel = config.predict_velocity
    train = np.concatenate([motion_frames(stats, m.positions, vel) for m in motions]).astype(np.float32)
    dim = train.shape[1]
    per_dim_std = train.std(axis=0)
    init_seed, shuffle_rng, noise_rng = _rngs(config.seed + 7919)
    enc_specs, dec_specs = dae_specs(dim, config.bottleneck, config.dae_activation)
    encoder = Network(enc_specs, init_seed, np.float32)
    decoder = Network(dec_specs, init_seed + 1, np.float32)
    opt = Adam(encoder.parameters() + decoder.parameters(), lr=config.lr)

    def loss_of(clean, noisy, train_mode):
        out = decoder.forward(encoder.forward(noisy, train=train_mode), train=train_mode)
        return mse_loss(out, clean)

    def step(idx):
        clean = train[idx]
        noisy = corrupt(clean, config.noise_scale, per_dim_std, noise_rng)
        encoder.zero_grad()
        decoder.zero_grad()
        loss, g = loss_of(clean, noisy, True)
        if np.isfinite(loss):
            encoder.backward(decoder.backward(g))
            opt.step()
        return loss

    initial = loss_of(train, train, False)[0]
    history = _run_epochs(step, len(train), config.dae_batch_size, config.dae_epochs, shuffle_rng, "dae")
    dae = MotionAutoencoder(encoder, decoder, stats, config, history, initial)
    check = val_motions or motions
    val = np.concatenate([motion_frames(stats, m.positions, vel) for m in check])
    dae.val_mse = dae.reconstruction_mse(val)
    return dae


def encode_motion(dae: MotionAutoencoder, frames):
    return dae.encode(frames)


def decode_repr(dae: MotionAutoencoder, z_seq):
    return dae.decode(z_seq)


# ---------------------------------------------------------------- full system and sweep

def train_aud2repr2pose(pairs, config: ModelConfig, val_pairs=None):
    motions = [m for _, m in pairs]
    stats = fit_motion_stats(motions)
    val_motions = [m for _, m in val_pairs] if val_pairs else None
    dae = train_dae(motions, config, val_motions, stats)
    speeche = train_speech_encoder(pairs, dae, config.replace(model_kind="aud2repr2pose"))
    return dae, speeche


def validation_scores(predict, val_pairs):
    """Mean APE and mean jerk of ``predict(features)`` over validation pairs."""
    apes, jerks = [], []
    for feats, motion in val_pairs:
        pred = predict(feats)
        apes.append(metrics.ape(motion, pred))
        jerks.append(metrics.mean_derivative(pred, 3))
    return float(np.mean(apes)), float(np.mean(jerks))


def sweep_bottleneck(train_pairs, val_pairs, dims, config: ModelConfig):
    rows = []
    for d in dims:
        cfg = config.replace(bottleneck=int(d))
        dae, speeche = train_aud2repr2pose(train_pairs, cfg, val_pairs)
        ape, jerk = validation_scores(lambda f: predict_aud2repr2pose(speeche, dae, f), val_pairs)
        rows.append({"d": int(d), "ape": ape, "jerk": jerk, "dae_val_mse": float(dae.val_mse)})
    return rows
