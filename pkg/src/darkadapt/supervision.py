"""Pseudo-supervision from unlabeled dark clips and day/dark mixing.

Auxiliary teachers produce predictions for each pool clip. An autoencoder is
fitted to the concatenated predictions beforehand, and its 64-d bottleneck
becomes the regression target for the recognizer's pseudo-label output.
"""
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConsistencyError, InvalidInputError, ShapeError
from .illuminance import clip_illuminance

LATENT_DIM = 64
ALPHA_RANGE = (0.4, 1.0)


# ---------------------------------------------------------------------------
# auxiliary teachers


@dataclass
class AuxiliaryPredictions:
    parts: list  # per-teacher 1-D arrays
    p: np.ndarray  # concatenation

    @property
    def dims(self):
        return [len(x) for x in self.parts]


class EmbeddingTeacher:
    """Frozen, randomly initialised audio-visual embedding network.

    Stands in for a video-text matching model's visual embedding: pooled
    colour/motion statistics and band energies go through a fixed random MLP.
    """

    def __init__(self, output_dim=32, seed=1234, n_bands=16):
        rng = np.random.default_rng(seed)
        self.output_dim = output_dim
        self.n_bands = n_bands
        in_dim = 4 * 4 * 3 + 4 * 4 + n_bands
        self.W1 = rng.normal(0, 1 / np.sqrt(in_dim), size=(in_dim, 128))
        self.W2 = rng.normal(0, 1 / np.sqrt(128), size=(128, output_dim))
        self.name = f"embed{output_dim}-s{seed}"

    def _features(self, clip):
        x = np.asarray(clip.frames, dtype=np.float64) / 255.0
        T, H, W, _ = x.shape
        gh, gw = H // 4, W // 4
        colour = x.mean(axis=0)[: gh * 4, : gw * 4].reshape(4, gh, 4, gw, 3).mean(axis=(1, 3)).ravel()
        motion = np.abs(np.diff(x, axis=0)).mean(axis=(0, 3)) if T > 1 else np.zeros((H, W))
        motion = motion[: gh * 4, : gw * 4].reshape(4, gh, 4, gw).mean(axis=(1, 3)).ravel()
        spec = np.abs(np.fft.rfft(np.asarray(clip.audio, dtype=np.float64))) ** 2
        bands = np.log(np.array([b.sum() for b in np.array_split(spec, self.n_bands)]) + 1e-8)
        return np.concatenate([colour * 4, motion * 20, bands / 10])

    def __call__(self, clip):
        h = np.tanh(self._features(clip) @ self.W1)
        return np.tanh(h @ self.W2)


class LocalizationTeacher:
    """Correlates the audio energy envelope with per-cell brightness change on a
    ``grid x grid`` map, standing in for a sound-source localization activation map."""

    def __init__(self, grid=7):
        self.grid = grid
        self.output_dim = grid * grid
        self.name = f"loc{grid}"

    def __call__(self, clip):
        x = np.asarray(clip.frames, dtype=np.float64).mean(axis=-1)
        T, H, W = x.shape
        g = self.grid
        ys = np.linspace(0, H, g + 1).astype(int)
        xs = np.linspace(0, W, g + 1).astype(int)
        cells = np.stack([[x[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(1, 2)) for j in range(g)]
                          for i in range(g)])  # (g, g, T)
        act = np.abs(np.diff(cells, axis=-1)) if T > 1 else np.zeros((g, g, 1))
        audio = np.asarray(clip.audio, dtype=np.float64)
        env = np.array([np.sqrt(np.mean(c ** 2)) for c in np.array_split(audio, act.shape[-1])])
        env = env - env.mean()
        act = act - act.mean(axis=-1, keepdims=True)
        num = (act * env).sum(-1)
        den = np.sqrt((act ** 2).sum(-1) * (env ** 2).sum()) + 1e-8
        return (num / den).ravel()


def default_teachers(seed=1234):
    return [EmbeddingTeacher(32, seed=seed), LocalizationTeacher(7)]


def collect_auxiliary_predictions(clip, teachers):
    if not teachers:
        raise InvalidInputError("need at least one teacher")
    parts = []
    for teacher in teachers:
        out = np.asarray(teacher(clip), dtype=np.float64).ravel()
        if out.shape[0] != teacher.output_dim:
            raise ConsistencyError(
                f"teacher {getattr(teacher, 'name', teacher)} emitted {out.shape[0]} values, "
                f"declared {teacher.output_dim}")
        parts.append(out)
    return AuxiliaryPredictions(parts=parts, p=np.concatenate(parts))


# ---------------------------------------------------------------------------
# autoencoder


class Autoencoder(nn.Module):
    """MLP autoencoder with a 64-d bottleneck; inputs are standardised internally."""

    def __init__(self, input_dim, latent_dim=LATENT_DIM, hidden=(256, 128)):
        super().__init__()
        h1, h2 = hidden
        self.encoder = nn.Sequential(
            nn.Linear(input_dim, h1), nn.ReLU(),
            nn.Linear(h1, h2), nn.ReLU(),
            nn.Linear(h2, latent_dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, h2), nn.ReLU(),
            nn.Linear(h2, h1), nn.ReLU(),
            nn.Linear(h1, input_dim),
        )
        self.register_buffer("mean", torch.zeros(input_dim))
        self.register_buffer("scale", torch.ones(input_dim))
        self.input_dim = input_dim
        self.latent_dim = latent_dim

    def encode(self, p):
        return self.encoder((p - self.mean) / self.scale)

    def decode(self, q):
        return self.decoder(q) * self.scale + self.mean

    def forward(self, p):
        return self.decode(self.encode(p))


def train_autoencoder(pool_predictions, epochs=300, lr=1e-3, batch_size=64, seed=0, hidden=(256, 128)):
    """Fit the autoencoder with a mean L1 reconstruction loss (Adam)."""
    P = np.asarray(pool_predictions, dtype=np.float32)
    if P.ndim != 2 or P.shape[0] == 0:
        raise InvalidInputError("need a non-empty (n, d) array of prediction vectors")
    torch.manual_seed(seed)
    ae = Autoencoder(P.shape[1], hidden=hidden)
    X = torch.from_numpy(P)
    ae.mean.copy_(X.mean(0))
    ae.scale.copy_(X.std(0, unbiased=False).clamp_min(1e-3))
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    n = X.shape[0]
    for _ in range(epochs):
        for idx in torch.randperm(n, generator=gen).split(batch_size):
            xb = X[idx]
            loss = (ae(xb) - xb).abs().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    ae.eval()
    return ae


def reconstruction_l1(ae, pool_predictions):
    X = torch.as_tensor(np.asarray(pool_predictions, dtype=np.float32))
    with torch.no_grad():
        return float((ae(X) - X).abs().mean())


def mean_predictor_l1(pool_predictions):
    X = np.asarray(pool_predictions, dtype=np.float64)
    return float(np.abs(X - X.mean(0)).mean())


def pseudo_label(ae, p):
    """64-d latent of one prediction vector (or a batch)."""
    x = torch.as_tensor(np.asarray(getattr(p, "p", p), dtype=np.float32))
    if x.shape[-1] != ae.input_dim:
        raise ShapeError(f"prediction dim {x.shape[-1]} does not match autoencoder input {ae.input_dim}")
    with torch.no_grad():
        return ae.encode(x).numpy()


def autoencoder_fingerprint(ae):
    h = hashlib.sha256()
    for k, v in sorted(ae.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# losses


def classification_loss(logits, labels, multilabel=False):
    """Softmax CE (mean over batch), or BCE summed over classes and averaged over the batch."""
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    if multilabel:
        per = nn.functional.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
        return per.sum(-1).mean()
    return nn.functional.cross_entropy(logits, labels)


def pseudo_loss(q_hat, q):
    """Sum over the batch of L1 distances."""
    if q_hat.shape != q.shape:
        raise InvalidInputError(f"pseudo predictions {tuple(q_hat.shape)} vs targets {tuple(q.shape)}")
    return (q_hat - q).abs().sum()


def loss_stage1(labeled_logits, labels, q_hat, q, lam=0.01, multilabel=False):
    """``L_CE(labeled) + lam * sum_j |q_hat_j - q_j|_1``. Returns (total, ce, weighted_pseudo)."""
    if labeled_logits.shape[0] != labels.shape[0]:
        raise InvalidInputError(f"{labeled_logits.shape[0]} outputs vs {labels.shape[0]} labels")
    if lam < 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    ce = classification_loss(labeled_logits, labels, multilabel)
    lu = lam * pseudo_loss(q_hat, q) if (lam > 0 and q.shape[0] > 0) else ce.new_zeros(())
    if lam > 0 and q.shape[0] == 0 and q_hat.shape[0] != 0:
        raise InvalidInputError("pseudo predictions given without targets")
    # float64 total so the logged terms add up to it exactly
    return ce.double() + lu.double(), ce, lu


def loss_end_to_end(labeled_logits, labels, q_hat, q, mixed_logits, mixed_labels, lam=0.01, multilabel=False):
    """Stage-1 loss plus cross-entropy on mixed samples. Returns (total, ce, weighted_pseudo, mix)."""
    _, ce, lu = loss_stage1(labeled_logits, labels, q_hat, q, lam, multilabel)
    if mixed_logits.shape[0] != mixed_labels.shape[0]:
        raise InvalidInputError(f"{mixed_logits.shape[0]} mixed outputs vs {mixed_labels.shape[0]} labels")
    mix = classification_loss(mixed_logits, mixed_labels, multilabel) if mixed_logits.shape[0] else ce.new_zeros(())
    return ce.double() + lu.double() + mix.double(), ce, lu, mix


# ---------------------------------------------------------------------------
# day2dark mixing


class AlphaSampler:
    """Uniform mixing weights on ``[0.4, 1.0)``."""

    def __init__(self, seed=0, low=ALPHA_RANGE[0], high=ALPHA_RANGE[1]):
        self.rng = np.random.default_rng(seed)
        self.low, self.high = low, high

    def sample(self, size=None):
        return self.rng.uniform(self.low, self.high, size=size)


def _resample_frames(frames, geometry):
    """Nearest-neighbour resample of a (T, H, W, 3) volume to ``geometry``."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise InvalidInputError(f"cannot resample frames of shape {frames.shape}")
    idx = [np.minimum((np.arange(g) * s / g).astype(int), s - 1) for g, s in zip(geometry, frames.shape[:3])]
    return frames[idx[0]][:, idx[1]][:, :, idx[2]]


def mix_frames(a, b, alpha):
    return alpha * np.asarray(a, dtype=np.float64) + (1.0 - alpha) * np.asarray(b, dtype=np.float64)


def day2dark_mix(labeled_clip, dark_clip, alpha, mix_audio=False):
    """Pixelwise ``alpha * x_i + (1 - alpha) * x_j``; label and (by default) audio from ``x_i``."""
    if not 0 < alpha <= 1:
        raise InvalidInputError(f"alpha must lie in (0, 1], got {alpha}")
    a = np.asarray(labeled_clip.frames)
    b = np.asarray(dark_clip.frames)
    if b.shape != a.shape:
        b = _resample_frames(b, a.shape[:3])
    frames = mix_frames(a, b, alpha)
    audio = np.asarray(labeled_clip.audio)
    if mix_audio:
        other = np.asarray(dark_clip.audio)
        if other.shape != audio.shape:
            raise InvalidInputError(f"cannot mix waveforms of length {audio.shape} and {other.shape}")
        audio = (alpha * audio + (1 - alpha) * other).astype(audio.dtype)
    mixed = replace(labeled_clip, frames=frames, audio=audio, clip_Y=clip_illuminance(frames).clip_Y,
                    clip_id=f"{labeled_clip.clip_id}+{dark_clip.clip_id}")
    return mixed, labeled_clip.label


# ---------------------------------------------------------------------------
# unlabeled-pool filter


def max_confidence(probs):
    return np.asarray(probs, dtype=np.float64).max(axis=-1)


def filter_unlabeled(pool, trained_model, threshold=0.5):
    """Drop pool clips the model assigns to any class with confidence above ``threshold``.

    ``trained_model`` maps a list of clips to an ``(n, n_classes)`` array of
    class probabilities.
    """
    if not pool:
        return []
    conf = max_confidence(trained_model(pool))
    return [c for c, p in zip(pool, conf) if p <= threshold]


# ---------------------------------------------------------------------------
# pseudo-label cache


def teacher_fingerprint(teachers):
    return hashlib.sha256("|".join(t.name for t in teachers).encode()).hexdigest()[:16]


class PseudoLabelCache:
    """``.npz`` of clip ids and targets plus a ``.json`` sidecar with fingerprints."""

    def __init__(self, path):
        self.path = Path(path)

    @property
    def meta_path(self):
        return self.path.with_suffix(".json")

    def save(self, ids, targets, fingerprint):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(self.path, ids=np.asarray(ids), targets=np.asarray(targets, dtype=np.float32))
        self.meta_path.write_text(json.dumps({"fingerprint": fingerprint, "n": len(ids),
                                              "dim": int(np.asarray(targets).shape[-1]) if len(ids) else 0},
                                             sort_keys=True))

    def load(self, fingerprint):
        """Targets keyed by clip id, or ``None`` if missing or stale."""
        if not self.path.exists() or not self.meta_path.exists():
            return None
        meta = json.loads(self.meta_path.read_text())
        if meta.get("fingerprint") != fingerprint:
            return None
        data = np.load(self.path)
        return {str(i): t for i, t in zip(data["ids"], data["targets"])}


@dataclass
class PseudoTargets:
    targets: dict  # clip_id -> vector
    autoencoder: object
    fingerprint: str
    recon_l1: float = float("nan")
    baseline_l1: float = float("nan")

    @property
    def dim(self):
        return next(iter(self.targets.values())).shape[0] if self.targets else LATENT_DIM


def build_pseudo_targets(pool, teachers=None, raw=False, cache_path=None, ae_epochs=300, seed=0):
    """Teacher predictions -> autoencoder -> per-clip targets (cached when ``cache_path`` is set).

    With ``raw=True`` the concatenated predictions themselves are the targets.
    """
    teachers = teachers or default_teachers()
    ids = [c.clip_id for c in pool]
    id_hash = hashlib.sha256("\n".join(ids).encode()).hexdigest()[:8]
    base_fp = f"{teacher_fingerprint(teachers)}-{id_hash}-{'raw' if raw else f'ae{ae_epochs}s{seed}'}"
    cache = PseudoLabelCache(cache_path) if cache_path else None
    if cache is not None:
        hit = cache.load(base_fp)
        if hit is not None and set(hit) == set(ids):
            return PseudoTargets(targets=hit, autoencoder=None, fingerprint=base_fp)
    if not pool:
        return PseudoTargets(targets={}, autoencoder=None, fingerprint=base_fp)
    P = np.stack([collect_auxiliary_predictions(c, teachers).p for c in pool])
    ae, recon, baseline = None, float("nan"), mean_predictor_l1(P)
    if raw:
        Q = P.astype(np.float32)
    else:
        ae = train_autoencoder(P, epochs=ae_epochs, seed=seed)
        recon = reconstruction_l1(ae, P)
        Q = pseudo_label(ae, P)
    if cache is not None:
        cache.save(ids, Q, base_fp)
    return PseudoTargets(targets=dict(zip(ids, Q)), autoencoder=ae, fingerprint=base_fp,
                         recon_l1=recon, baseline_l1=baseline)
