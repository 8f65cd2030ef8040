"""Synthetic audio-visual benchmark with a controllable day/dark composition.

Each labeled clip shows a class-specific shape moving along a class-specific
trajectory, and carries a class-specific tone signature in its audio. Visual
brightness is set per clip to hit a target illuminance; audio never depends on
it. The unlabeled pool holds dark, task-irrelevant distractor clips.
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, InvalidInputError
from .illuminance import DARK_THRESHOLD, clip_illuminance

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test", "pool")


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, 3), uint8 or float in [0, 255]
    audio: np.ndarray  # (S,) float32 mono
    sample_rate: int
    label: object  # int, np.ndarray of {0,1} (multi-label), or None (unlabeled)
    clip_Y: float
    clip_id: str
    seed: int = 0
    fps: float = 8.0

    @property
    def is_multilabel(self):
        return isinstance(self.label, np.ndarray)


@dataclass
class BenchConfig:
    n_classes: int = 8
    clips_per_class: int = 100
    val_per_class: int = 5
    test_per_class: int = 120
    dark_fraction_train: float = 0.02
    dark_fraction_test: float = 0.5
    unlabeled_pool_size: int = 600
    relevant_fraction: float = 0.0
    frame_geometry: tuple = (8, 32, 32)
    fps: float = 8.0
    sample_rate: int = 8000
    seed: int = 0
    t: float = DARK_THRESHOLD
    multilabel: bool = False
    day_Y_range: tuple = (45.0, 130.0)
    dark_Y_range: tuple = (8.0, 30.0)
    pool_Y_range: tuple = (4.0, 30.0)
    day_noise_sigma: float = 1.5
    dark_noise_sigma: float = 5.0
    lamp_prob: float = 0.3
    audio_snr_db: tuple = (0.0, 10.0)
    audio_confuser_prob: float = 0.25

    def __post_init__(self):
        self.frame_geometry = tuple(int(v) for v in self.frame_geometry)
        for name in ("day_Y_range", "dark_Y_range", "pool_Y_range", "audio_snr_db"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self):
        for name in ("dark_fraction_train", "dark_fraction_test", "relevant_fraction", "lamp_prob",
                     "audio_confuser_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("clips_per_class", "val_per_class", "test_per_class", "unlabeled_pool_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if len(self.frame_geometry) != 3 or min(self.frame_geometry) < 1:
            raise ConfigError(f"bad frame geometry {self.frame_geometry}")
        n_train = self.n_classes * self.clips_per_class
        if self.dark_fraction_train > 0 and round(self.dark_fraction_train * n_train) == 0:
            raise ConfigError(
                f"dark_fraction_train={self.dark_fraction_train} yields no dark clips out of {n_train}")
        if self.pool_Y_range[1] > self.t or self.dark_Y_range[1] > self.t:
            raise ConfigError("dark and pool illuminance ranges must lie at or below t")
        if self.day_Y_range[0] <= self.t:
            raise ConfigError("day illuminance range must lie above t")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class DatasetSplit:
    config: BenchConfig
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    pool: list = field(default_factory=list)

    def __getitem__(self, name):
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def items(self):
        return [(name, getattr(self, name)) for name in SPLITS]


# ---------------------------------------------------------------------------
# class signatures

_SHAPES = ("square", "disk", "cross", "ring")


def _class_colour(c, n):
    hue = c / n
    # cheap hue wheel, channels in [0.25, 1]
    r = 0.625 + 0.375 * np.cos(2 * np.pi * hue)
    g = 0.625 + 0.375 * np.cos(2 * np.pi * (hue - 1 / 3))
    b = 0.625 + 0.375 * np.cos(2 * np.pi * (hue - 2 / 3))
    return np.array([r, g, b])


def class_tone(c, n):
    """Fundamental frequency (Hz) and amplitude-modulation rate of class ``c``."""
    f0 = 250.0 * (12.0 ** (c / max(n - 1, 1)))  # 250 Hz .. 3 kHz, log-spaced
    am = 2.0 + 5.0 * ((c * 3) % n) / n
    return f0, am


def _shape_mask(kind, yy, xx, cy, cx, size):
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= size) & (np.abs(dx) <= size)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= size ** 2
    if kind == "cross":
        return ((np.abs(dy) <= size) & (np.abs(dx) <= size / 3)) | (
            (np.abs(dx) <= size) & (np.abs(dy) <= size / 3))
    r2 = dy ** 2 + dx ** 2
    return (r2 <= size ** 2) & (r2 >= (0.5 * size) ** 2)


def _render_base(classes, n_classes, geometry, rng):
    """Linear-intensity frame volume in [0, 1] showing one moving shape per class."""
    T, H, W = geometry
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    bg = rng.uniform(0.15, 0.35) * (1 + 0.15 * rng.uniform(-1, 1, size=3))
    grad = 0.08 * rng.uniform(-1, 1) * (xx / max(W - 1, 1) - 0.5)
    base = np.broadcast_to(bg, (T, H, W, 3)) + grad[None, :, :, None]
    base = np.array(base)
    for c in classes:
        kind = _SHAPES[c % len(_SHAPES)]
        angle = 2 * np.pi * c / n_classes + rng.normal(0, 0.12)
        speed = min(H, W) * 0.06 * rng.uniform(0.8, 1.2)
        size = min(H, W) * 0.16 * rng.uniform(0.85, 1.15)
        vy, vx = speed * np.sin(angle), speed * np.cos(angle)
        cy0 = H / 2 - vy * (T - 1) / 2 + rng.uniform(-2, 2)
        cx0 = W / 2 - vx * (T - 1) / 2 + rng.uniform(-2, 2)
        colour = _class_colour(c, n_classes) * rng.uniform(0.9, 1.1, size=3)
        # stripe texture with a class-specific orientation
        theta = np.pi * c / n_classes
        stripes = 0.75 + 0.25 * np.sign(np.sin((xx * np.cos(theta) + yy * np.sin(theta)) * 1.3))
        for t in range(T):
            m = _shape_mask(kind, yy, xx, cy0 + vy * t, cx0 + vx * t, size)
            base[t][m] = colour * stripes[m][:, None]
    return np.clip(base, 0.0, 1.0)


def _render_distractor(geometry, rng):
    """Drifting soft blobs with random colours; carries no class shape."""
    T, H, W = geometry
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    base = np.empty((T, H, W, 3))
    base[:] = rng.uniform(0.1, 0.4, size=3)
    for _ in range(rng.integers(1, 4)):
        colour = rng.uniform(0.2, 1.0, size=3)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        vy, vx = rng.normal(0, 1.0, size=2)
        sig = rng.uniform(2.0, 6.0)
        for t in range(T):
            g = np.exp(-((yy - cy - vy * t) ** 2 + (xx - cx - vx * t) ** 2) / (2 * sig ** 2))
            base[t] = base[t] * (1 - g[..., None]) + colour * g[..., None]
    return np.clip(base, 0.0, 1.0)


def _expose_with_lamp(base, target, noise, lamp):
    # a lamp can push very dark targets out of reach; drop it rather than fail
    if lamp is None:
        return _expose(base, target, noise)
    base, mask, plain = lamp
    try:
        return _expose(base, target, noise, mask)
    except GenerationError:
        return _expose(plain, target, noise)


def _add_lamp(base, rng):
    T, H, W, _ = base.shape
    yy, xx = np.mgrid[0:H, 0:W]
    cy, cx = rng.integers(0, H), rng.integers(0, W)
    r = rng.uniform(1.0, 2.2)
    m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    out = base.copy()
    out[:, m] = np.array([1.0, 0.9, 0.6])
    return out, m, base


def _expose(base, target, noise, lamp_mask=None):
    """Pick the gain so that the exposed clip lands on ``target`` illuminance.

    Illuminance is monotone in gain, so bisection is enough. The lamp region
    (if any) stays at full brightness regardless of gain.
    """
    w = np.array([0.299, 0.587, 0.144])

    def render(gain):
        x = base * (gain * 255.0) + noise
        if lamp_mask is not None:
            x[:, lamp_mask] = base[:, lamp_mask] * 255.0 + noise[:, lamp_mask]
        return np.clip(x, 0.0, 255.0)

    def luma(x):
        return float((x @ w).mean())

    lo_y = luma(render(0.0))
    hi_gain = 1.0 / max(base[base > 0].min(), 1e-3) if np.any(base > 0) else 1.0
    hi_y = luma(render(hi_gain))
    if not (lo_y * 0.9 <= target <= hi_y * 1.1):
        raise GenerationError(
            f"illuminance target {target:.2f} unreachable; feasible range is [{lo_y:.2f}, {hi_y:.2f}]")
    lo, hi = 0.0, hi_gain
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if luma(render(mid)) < target:
            lo = mid
        else:
            hi = mid
    return np.rint(render(0.5 * (lo + hi))).astype(np.uint8)


# ---------------------------------------------------------------------------
# audio


def _tone(f0, am, n, sr, rng):
    t = np.arange(n) / sr
    f = f0 * rng.uniform(0.98, 1.02)
    ph = rng.uniform(0, 2 * np.pi, size=2)
    env = 0.6 + 0.4 * np.sin(2 * np.pi * am * t + ph[0])
    return env * (np.sin(2 * np.pi * f * t + ph[1]) + 0.4 * np.sin(4 * np.pi * f * t + 2 * ph[1]))


def _class_audio(classes, cfg, n, rng):
    sig = np.zeros(n)
    for c in classes:
        sig += _tone(*class_tone(c, cfg.n_classes), n, cfg.sample_rate, rng)
    other = [c for c in range(cfg.n_classes) if c not in classes]
    if rng.random() < cfg.audio_confuser_prob and other:
        c = rng.choice(other)
        sig += rng.uniform(0.5, 0.9) * _tone(*class_tone(c, cfg.n_classes), n, cfg.sample_rate, rng)
    return _with_noise(sig, cfg, rng)


def _with_noise(sig, cfg, rng):
    snr_db = rng.uniform(*cfg.audio_snr_db)
    p_sig = np.mean(sig ** 2) + 1e-12
    noise = rng.normal(0, np.sqrt(p_sig / 10 ** (snr_db / 10)), size=sig.shape)
    out = sig + noise
    return (0.25 * out / (np.abs(out).max() + 1e-12)).astype(np.float32)


def _distractor_audio(cfg, n, rng):
    sr = cfg.sample_rate
    t = np.arange(n) / sr
    f_start, f_end = rng.uniform(200, 3500, size=2)
    chirp = np.sin(2 * np.pi * (f_start * t + 0.5 * (f_end - f_start) * t ** 2 / t[-1]))
    gate = (rng.random(n // 400 + 1) < 0.5).repeat(400)[:n]
    sig = chirp * gate + 0.7 * rng.normal(0, 1, size=n)
    return (0.25 * sig / (np.abs(sig).max() + 1e-12)).astype(np.float32)


def _n_samples(cfg):
    return int(round(cfg.frame_geometry[0] / cfg.fps * cfg.sample_rate))


def _streams(seed):
    # separate visual and audio streams: audio must not depend on the exposure path
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(2)]


# ---------------------------------------------------------------------------
# public operations


def generate_clip(class_id, illuminance_target, seed, config=None, clip_id=None):
    """Render one labeled clip at the requested illuminance.

    ``class_id`` may be an int or, in multi-label mode, a sequence of ints.
    """
    cfg = config or BenchConfig()
    classes = [int(class_id)] if np.isscalar(class_id) else [int(c) for c in class_id]
    for c in classes:
        if not 0 <= c < cfg.n_classes:
            raise InvalidInputError(f"class_id {c} outside [0, {cfg.n_classes})")
    rng, rng_audio = _streams(seed)
    dark = illuminance_target <= cfg.t
    base = _render_base(classes, cfg.n_classes, cfg.frame_geometry, rng)
    lamp = None
    if dark and rng.random() < cfg.lamp_prob:
        lamp = _add_lamp(base, rng)
    sigma = cfg.dark_noise_sigma if dark else cfg.day_noise_sigma
    noise = rng.normal(0, sigma, size=base.shape)
    frames = _expose_with_lamp(base, illuminance_target, noise, lamp)
    audio = _class_audio(classes, cfg, _n_samples(cfg), rng_audio)
    if cfg.multilabel:
        label = np.zeros(cfg.n_classes, dtype=np.int64)
        label[classes] = 1
    else:
        label = classes[0]
    return Clip(frames=frames, audio=audio, sample_rate=cfg.sample_rate, label=label,
                clip_Y=clip_illuminance(frames).clip_Y, clip_id=clip_id or f"c{classes[0]}_{seed}",
                seed=int(seed), fps=cfg.fps)


def generate_distractor(illuminance_target, seed, config=None, clip_id=None):
    """Unlabeled dark clip with no target-class content."""
    cfg = config or BenchConfig()
    rng, rng_audio = _streams(seed)
    base = _render_distractor(cfg.frame_geometry, rng)
    lamp = None
    if rng.random() < cfg.lamp_prob:
        lamp = _add_lamp(base, rng)
    noise = rng.normal(0, cfg.dark_noise_sigma, size=base.shape)
    frames = _expose_with_lamp(base, illuminance_target, noise, lamp)
    audio = _distractor_audio(cfg, _n_samples(cfg), rng_audio)
    return Clip(frames=frames, audio=audio, sample_rate=cfg.sample_rate, label=None,
                clip_Y=clip_illuminance(frames).clip_Y, clip_id=clip_id or f"u_{seed}",
                seed=int(seed), fps=cfg.fps)


def darken(clip, factor, noise_sigma=0.0, seed=0):
    """Scale intensities by ``factor``, add sensor noise, re-clip. Audio is untouched."""
    if not 0 < factor <= 1:
        raise InvalidInputError(f"darkening factor must lie in (0, 1], got {factor}")
    frames = np.asarray(clip.frames, dtype=np.float64) * factor
    if noise_sigma > 0:
        frames = frames + np.random.default_rng(seed).normal(0, noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 255.0)
    if factor == 1 and noise_sigma == 0:
        frames = np.asarray(clip.frames).copy()
    elif np.asarray(clip.frames).dtype == np.uint8 and noise_sigma > 0:
        frames = np.rint(frames).astype(np.uint8)
    return replace(clip, frames=frames, clip_Y=clip_illuminance(frames).clip_Y)


def _clip_seeds(seed, split, n):
    key = SPLITS.index(split)
    ss = np.random.SeedSequence([int(seed), key])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def _labels_for(cfg, n_per_class, rng):
    """Balanced label list; in multi-label mode the primary class is balanced."""
    labels = []
    for c in range(cfg.n_classes):
        for _ in range(n_per_class):
            if cfg.multilabel:
                k = int(rng.integers(1, 4))
                others = rng.choice([o for o in range(cfg.n_classes) if o != c], size=k - 1, replace=False)
                labels.append([c] + [int(o) for o in others])
            else:
                labels.append(c)
    return labels


def _labeled_split(cfg, split, n_per_class, dark_fraction, rng):
    labels = _labels_for(cfg, n_per_class, rng)
    n = len(labels)
    n_dark = int(round(dark_fraction * n))
    is_dark = np.zeros(n, dtype=bool)
    is_dark[rng.permutation(n)[:n_dark]] = True
    seeds = _clip_seeds(cfg.seed, split, n)
    clips = []
    for i, (lab, dark) in enumerate(zip(labels, is_dark)):
        lo, hi = cfg.dark_Y_range if dark else cfg.day_Y_range
        target = rng.uniform(lo, hi)
        clips.append(generate_clip(lab, target, seeds[i], cfg, clip_id=f"{split}_{i:05d}"))
    return clips


def generate_dataset(config, out=None):
    """Generate train/val/test splits plus the unlabeled dark pool.

    When ``out`` is given the dataset is also written there (see ``save_dataset``).
    """
    cfg = config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 99]))
    ds = DatasetSplit(config=cfg)
    ds.train = _labeled_split(cfg, "train", cfg.clips_per_class, cfg.dark_fraction_train, rng)
    ds.val = _labeled_split(cfg, "val", cfg.val_per_class, cfg.dark_fraction_test, rng)
    ds.test = _labeled_split(cfg, "test", cfg.test_per_class, cfg.dark_fraction_test, rng)

    seeds = _clip_seeds(cfg.seed, "pool", cfg.unlabeled_pool_size)
    n_rel = int(round(cfg.relevant_fraction * cfg.unlabeled_pool_size))
    for i, s in enumerate(seeds):
        target = rng.uniform(*cfg.pool_Y_range)
        cid = f"pool_{i:05d}"
        if i < n_rel:
            c = generate_clip(int(rng.integers(cfg.n_classes)), target, s, cfg, clip_id=cid)
            c.label = None
        else:
            c = generate_distractor(target, s, cfg, clip_id=cid)
        ds.pool.append(c)
    if out is not None:
        save_dataset(ds, out)
    return ds


# ---------------------------------------------------------------------------
# on-disk layout
#
# <root>/manifest.json                     splits -> clip ids, bench config, format version
# <root>/<split>/<clip_id>/frames.npy      (T, H, W, 3) uint8 (npy header carries dims/dtype)
# <root>/<split>/<clip_id>/audio.raw       little-endian float32 mono, no header
# <root>/<split>/<clip_id>/meta.json       label, clip_Y, seed, sample_rate, n_samples, fps


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_clip(clip, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "frames.npy", np.asarray(clip.frames))
    np.asarray(clip.audio, dtype="<f4").tofile(d / "audio.raw")
    label = clip.label.tolist() if isinstance(clip.label, np.ndarray) else clip.label
    _dump_json({
        "clip_id": clip.clip_id,
        "label": label,
        "multilabel": isinstance(clip.label, np.ndarray),
        "clip_Y": float(clip.clip_Y),
        "seed": int(clip.seed),
        "sample_rate": int(clip.sample_rate),
        "n_samples": int(np.asarray(clip.audio).shape[0]),
        "fps": float(clip.fps),
    }, d / "meta.json")


def load_clip(directory):
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    audio = np.fromfile(d / "audio.raw", dtype="<f4")
    if audio.shape[0] != meta["n_samples"]:
        raise InvalidInputError(f"{d}: audio.raw has {audio.shape[0]} samples, meta says {meta['n_samples']}")
    label = meta["label"]
    if meta.get("multilabel"):
        label = np.asarray(label, dtype=np.int64)
    return Clip(frames=np.load(d / "frames.npy"), audio=audio, sample_rate=meta["sample_rate"],
                label=label, clip_Y=meta["clip_Y"], clip_id=meta["clip_id"], seed=meta["seed"],
                fps=meta.get("fps", 8.0))


def save_dataset(ds, root):
    root = Path(root)
    for name, clips in ds.items():
        for c in clips:
            save_clip(c, root / name / c.clip_id)
    _dump_json({
        "format_version": FORMAT_VERSION,
        "config": ds.config.to_dict(),
        "splits": {name: [c.clip_id for c in clips] for name, clips in ds.items()},
    }, root / "manifest.json")


def load_dataset(root):
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise InvalidInputError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported dataset format {manifest.get('format_version')}")
    ds = DatasetSplit(config=BenchConfig.from_dict(manifest["config"]))
    for name in SPLITS:
        ids = manifest["splits"].get(name, [])
        setattr(ds, name, [load_clip(os.path.join(root, name, cid)) for cid in ids])
    return ds
