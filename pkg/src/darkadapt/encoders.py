"""Toy visual/audio backbones and the audio projection.

Anything that maps a clip batch to ``(B, n_tokens, dim)`` and exposes
``feature_dims()`` / ``token_layout()`` can stand in for these.
"""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError, ShapeError

LOG_FLOOR = 1e-6


@dataclass
class VisualFeatures:
    tokens: torch.Tensor  # (n_v, d_v) or (B, n_v, d_v)
    patch_layout: tuple


@dataclass
class AudioFeatures:
    tokens: torch.Tensor  # (n_a, d_a) or (B, n_a, d_a)
    layout: tuple


def _kaiming(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


def token_grid(geometry, patch):
    """Patch-grid counts ``(nt, nh, nw)`` for a ``(T, H, W)`` clip."""
    if any(g % p for g, p in zip(geometry, patch)):
        raise ShapeError(f"frame geometry {tuple(geometry)} is not divisible by patch size {tuple(patch)}")
    return tuple(g // p for g, p in zip(geometry, patch))


class ToyVisualEncoder(nn.Module):
    """Two 3-D conv blocks (the first halves H and W) and a strided patch embedding.

    ``patch`` is given in input-pixel units; its spatial sides must be even.
    """

    def __init__(self, geometry=(8, 32, 32), patch=(2, 8, 8), d_v=64, channels=(16, 32)):
        super().__init__()
        self.geometry = tuple(geometry)
        self.patch = tuple(patch)
        self.d_v = d_v
        if patch[1] % 2 or patch[2] % 2:
            raise ShapeError(f"spatial patch sides must be even, got {tuple(patch)}")
        self.layout = token_grid(self.geometry, self.patch)
        c1, c2 = channels
        self.stem = nn.Sequential(
            nn.Conv3d(3, c1, kernel_size=(1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)),
            nn.ReLU(),
            nn.Conv3d(c1, c2, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.patch_embed = nn.Conv3d(c2, d_v, kernel_size=(patch[0], patch[1] // 2, patch[2] // 2),
                                     stride=(patch[0], patch[1] // 2, patch[2] // 2))
        _kaiming(self)

    def feature_dims(self):
        return self.d_v

    def token_layout(self):
        return self.layout

    def forward(self, frames):
        """``frames``: (B, T, H, W, 3) in [0, 255] -> tokens (B, n_v, d_v)."""
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        if tuple(frames.shape[1:4]) != self.geometry:
            raise ShapeError(
                f"clip geometry {tuple(frames.shape[1:4])} does not match encoder geometry {self.geometry} "
                f"(patch {self.patch})")
        x = frames.to(self.patch_embed.weight.dtype).permute(0, 4, 1, 2, 3) / 255.0
        x = self.patch_embed(self.stem(x))
        return x.flatten(2).transpose(1, 2)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_bands, n_fft, sample_rate, f_min=0.0, f_max=None):
    """Triangular mel filters, shape ``(n_bands, n_fft // 2 + 1)``, and their centre frequencies."""
    f_max = f_max or sample_rate / 2
    mels = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_bands + 2)
    hz = _mel_to_hz(mels)
    bins = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    fb = np.zeros((n_bands, bins.size))
    for b in range(n_bands):
        lo, c, hi = hz[b], hz[b + 1], hz[b + 2]
        up = (bins - lo) / (c - lo)
        down = (hi - bins) / (hi - c)
        fb[b] = np.clip(np.minimum(up, down), 0, None)
    return fb, hz[1:-1]


class LogMelSpectrogram(nn.Module):
    """Log-magnitude mel spectrogram: 25 ms Hann window, 10 ms hop, 64 bands by default."""

    def __init__(self, sample_rate=8000, window_ms=25.0, hop_ms=10.0, n_bands=64, n_fft=None):
        super().__init__()
        self.sample_rate = sample_rate
        self.win = int(round(sample_rate * window_ms / 1000))
        self.hop = int(round(sample_rate * hop_ms / 1000))
        self.n_fft = n_fft or int(2 ** np.ceil(np.log2(2 * self.win)))
        self.n_bands = n_bands
        fb, centres = mel_filterbank(n_bands, self.n_fft, sample_rate)
        self.band_centres = centres
        self.register_buffer("fb", torch.tensor(fb, dtype=torch.float32), persistent=False)
        self.register_buffer("window", torch.hann_window(self.win, dtype=torch.float32), persistent=False)

    def forward(self, waveform):
        """(B, S) or (S,) -> (B, n_bands, n_frames)."""
        if waveform.dim() == 1:
            waveform = waveform.unsqueeze(0)
        if waveform.shape[-1] < self.win:
            raise InvalidInputError(
                f"waveform has {waveform.shape[-1]} samples, shorter than one {self.win}-sample window")
        w = waveform.to(self.fb.dtype)
        spec = torch.stft(w, n_fft=self.n_fft, hop_length=self.hop, win_length=self.win,
                          window=self.window.to(w.dtype), center=False, return_complex=True)
        power = spec.abs() ** 2
        return torch.log(torch.einsum("fk,bkt->bft", self.fb.to(w.dtype), power) + LOG_FLOOR)


class ToyAudioEncoder(nn.Module):
    """Log-mel spectrogram -> two strided 2-D conv blocks -> (frequency x time) token grid."""

    def __init__(self, sample_rate=8000, d_a=64, grid=(4, 4), n_bands=64, channels=16,
                 window_ms=25.0, hop_ms=10.0):
        super().__init__()
        self.spectrogram = LogMelSpectrogram(sample_rate, window_ms, hop_ms, n_bands)
        self.grid = tuple(grid)
        self.d_a = d_a
        self.net = nn.Sequential(
            nn.Conv2d(2, channels, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, d_a, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(self.grid),
        )
        _kaiming(self)

    def feature_dims(self):
        return self.d_a

    def token_layout(self):
        return self.grid

    def encode_spectrogram(self, spec):
        # per-clip standardisation; the raw log scale has a large constant offset
        mu = spec.mean(dim=(-2, -1), keepdim=True)
        sd = spec.std(dim=(-2, -1), keepdim=True) + 1e-3
        x = ((spec - mu) / sd).unsqueeze(1)
        # band-position channel: convolutions alone cannot tell low from high frequency
        coord = torch.linspace(-1.0, 1.0, spec.shape[-2], dtype=x.dtype)[:, None].expand(spec.shape[-2:])
        x = torch.cat([x, coord.expand(x.shape[0], 1, *spec.shape[-2:])], dim=1)
        return self.net(x.to(self.net[0].weight.dtype)).flatten(2).transpose(1, 2)

    def forward(self, waveform):
        return self.encode_spectrogram(self.spectrogram(waveform))


def _as_batch(clips, attr):
    arrs = [np.asarray(getattr(c, attr)) for c in clips]
    return torch.from_numpy(np.stack(arrs).astype(np.float32))


def encode_visual(clip, encoder):
    """Visual tokens for one clip (or a list of clips, batched)."""
    batch = isinstance(clip, (list, tuple))
    frames = _as_batch(clip if batch else [clip], "frames")
    with torch.no_grad():
        tokens = encoder(frames)
    return VisualFeatures(tokens=tokens if batch else tokens[0], patch_layout=encoder.token_layout())


def encode_audio(waveform, sample_rate, encoder):
    """Audio tokens for a 1-D waveform (or a 2-D batch of them)."""
    if sample_rate != encoder.spectrogram.sample_rate:
        raise InvalidInputError(
            f"waveform sample rate {sample_rate} differs from encoder rate {encoder.spectrogram.sample_rate}")
    w = torch.as_tensor(np.asarray(waveform, dtype=np.float32))
    with torch.no_grad():
        tokens = encoder(w)
    return AudioFeatures(tokens=tokens if w.dim() == 2 else tokens[0], layout=encoder.token_layout())


def project_audio(audio_tokens, E_a):
    """``A = A' E^a``; works on (n_a, d_a) or (B, n_a, d_a)."""
    a = audio_tokens.tokens if isinstance(audio_tokens, AudioFeatures) else audio_tokens
    if a.shape[-1] != E_a.shape[0]:
        raise ShapeError(f"audio feature dim {a.shape[-1]} does not match projection input dim {E_a.shape[0]}")
    return a @ E_a
