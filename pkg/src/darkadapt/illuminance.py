"""Frame/clip illuminance, day/dark partitioning and composition histograms."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import InvalidInputError

# Luma weights as used for the darkness audit. Blue is 0.144, not the common
# Rec.601 0.114; swap in ``REC601_WEIGHTS`` for the standard variant.
LUMA_WEIGHTS = (0.299, 0.587, 0.144)
REC601_WEIGHTS = (0.299, 0.587, 0.114)
LUMA_CEILING = 255.0 * sum(LUMA_WEIGHTS)

DARK_THRESHOLD = 40.0


@dataclass(frozen=True)
class IlluminanceRecord:
    per_frame_Y: np.ndarray
    clip_Y: float


def _check_frames(frames):
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise InvalidInputError(f"expected (T, H, W, 3) frames, got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise InvalidInputError("clip has zero frames")
    if frames.shape[1] == 0 or frames.shape[2] == 0:
        raise InvalidInputError(f"empty frame: H x W = {frames.shape[1]} x {frames.shape[2]}")
    return frames


def frame_illuminance(frame, weights=LUMA_WEIGHTS):
    """Mean weighted RGB intensity of one ``(H, W, 3)`` frame."""
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise InvalidInputError(f"expected (H, W, 3) frame, got shape {frame.shape}")
    frames = _check_frames(frame[None])
    h, w = frames.shape[1:3]
    return float(_kernels.weighted_channel_sums(frames, weights)[0] / (h * w))


def frames_illuminance(frames, weights=LUMA_WEIGHTS, stride=1):
    """Per-frame illuminance of a ``(T, H, W, 3)`` volume.

    ``stride`` subsamples pixels on both spatial axes for large corpora;
    the default uses every pixel.
    """
    frames = _check_frames(frames)
    if stride < 1:
        raise InvalidInputError(f"stride must be >= 1, got {stride}")
    n_pix = len(range(0, frames.shape[1], stride)) * len(range(0, frames.shape[2], stride))
    return _kernels.weighted_channel_sums(frames, weights, stride) / n_pix


def clip_illuminance(clip, weights=LUMA_WEIGHTS, stride=1):
    """Illuminance record for a clip (anything with ``.frames``) or a raw frame volume."""
    frames = getattr(clip, "frames", clip)
    per_frame = frames_illuminance(frames, weights, stride)
    return IlluminanceRecord(per_frame_Y=per_frame, clip_Y=float(per_frame.mean()))


def partition(records, t=DARK_THRESHOLD):
    """Split ``(clip_id, clip_Y)`` pairs into ``(day_ids, dark_ids)``; ``Y <= t`` is dark."""
    if not t > 0:
        raise InvalidInputError(f"threshold must be positive, got {t}")
    day, dark = [], []
    for clip_id, y in records:
        (dark if y <= t else day).append(clip_id)
    return day, dark


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    overflow: int

    @property
    def total(self):
        return int(self.counts.sum()) + self.overflow

    @property
    def fractions(self):
        total = self.total
        if total == 0:
            return np.zeros(len(self.counts))
        return self.counts / total


def check_edges(bin_edges):
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise InvalidInputError("need at least two bin edges")
    if not np.all(np.diff(edges) > 0):
        raise InvalidInputError(f"bin edges must be strictly ascending: {edges.tolist()}")
    return edges


def bin_assign(values, bin_edges):
    """Bin index per value; ``len(edges) - 1`` marks out-of-range."""
    edges = check_edges(bin_edges)
    return _kernels.bin_index(np.asarray(values, dtype=np.float64).ravel(), edges)


def illuminance_histogram(records, bin_edges):
    """Counts per half-open bin ``[e_i, e_{i+1})`` plus an overflow bucket.

    ``records`` may be ``(clip_id, Y)`` pairs or bare Y values.
    """
    edges = check_edges(bin_edges)
    ys = [r[1] if isinstance(r, tuple) else r for r in records]
    idx = bin_assign(ys, edges)
    n_bins = len(edges) - 1
    counts = np.bincount(idx, minlength=n_bins + 1)
    return Histogram(edges=edges, counts=counts[:n_bins].astype(np.int64), overflow=int(counts[n_bins]))


def default_bin_edges(step=10.0):
    """``0, step, 2*step, ...`` up to and including the luma ceiling."""
    n = int(np.ceil(LUMA_CEILING / step))
    return np.arange(n + 1) * float(step)


@dataclass
class AuditReport:
    t: float
    rows: list          # (split, clip_id, clip_Y)
    day_ids: list
    dark_ids: list
    histogram: Histogram

    def text(self):
        out = [f"threshold t: {self.t:g}", f"clips: {len(self.rows)}",
               f"dark (Y <= t): {len(self.dark_ids)}", f"day (Y > t): {len(self.day_ids)}", "",
               "per-clip illuminance:"]
        out += [f"  {split}/{cid}: {y:.4f}" for split, cid, y in self.rows]
        out += ["", "dark clips:"] + [f"  {c}" for c in self.dark_ids]
        out += ["", "day clips:"] + [f"  {c}" for c in self.day_ids]
        out += ["", "histogram:", "  bin               count  fraction"]
        e, fr = self.histogram.edges, self.histogram.fractions
        for i, n in enumerate(self.histogram.counts):
            out.append(f"  [{e[i]:g}, {e[i + 1]:g})".ljust(20) + f"{int(n):>6d}  {fr[i]:.4f}")
        out.append(f"  out of range: {self.histogram.overflow}")
        return "\n".join(out) + "\n"

    def csv(self):
        lines = ["clip_id,clip_Y,split"]
        lines += [f"{cid},{y!r},{split}" for split, cid, y in self.rows]
        return "\n".join(lines) + "\n"


def audit_dataset(dataset, t=DARK_THRESHOLD, bin_edges=None, stride=1):
    """Recompute every clip's illuminance from its stored frames, then partition and histogram.

    ``dataset`` is anything with ``items()`` yielding ``(split, clips)``.
    """
    edges = default_bin_edges() if bin_edges is None else check_edges(bin_edges)
    rows = []
    for split, clips in dataset.items():
        for c in clips:
            rows.append((split, c.clip_id, clip_illuminance(c.frames, stride=stride).clip_Y))
    keyed = [(f"{s}/{cid}", y) for s, cid, y in rows]
    day, dark = partition(keyed, t)
    return AuditReport(float(t), rows, day, dark, illuminance_histogram(keyed, edges))


def write_audit(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "audit.txt").write_text(report.text())
    (out / "audit.csv").write_text(report.csv())
    return out / "audit.txt", out / "audit.csv"
