"""Metrics, illuminance-binned curves, activation profiles and report files."""
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .illuminance import DARK_THRESHOLD, bin_assign, check_edges

log = logging.getLogger(__name__)

ACCURACY = "accuracy"
HAMMING = "hamming"
MULTILABEL_THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# metrics


def _as_scores(predictions):
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
    return p


def top1_accuracy(predictions, labels):
    """Fraction of rows whose argmax equals the label.

    Ties go to the lowest class index (``np.argmax`` semantics).
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if p.size == 0 or y.size == 0:
        raise InvalidInputError("top1_accuracy needs at least one sample")
    if p.ndim != 2 or p.shape[0] != y.size:
        raise InvalidInputError(f"predictions {p.shape} and labels {y.shape} do not line up")
    return float(np.mean(np.argmax(p, axis=1) == y))


def hamming_distance(pred_bits, label_bits, threshold=MULTILABEL_THRESHOLD):
    """Mean per-label mismatch; predictions are binarised with ``p >= threshold``."""
    p = np.asarray(pred_bits, dtype=np.float64)
    y = np.asarray(label_bits)
    if p.shape != y.shape:
        raise InvalidInputError(f"prediction shape {p.shape} != label shape {y.shape}")
    if p.size == 0:
        raise InvalidInputError("hamming_distance needs at least one sample")
    return float(np.mean((p >= threshold) != (y > 0.5)))


def metric_name(multilabel):
    return HAMMING if multilabel else ACCURACY


def compute_metric(scores, labels, multilabel=False):
    if multilabel:
        return hamming_distance(scores, labels)
    return top1_accuracy(scores, labels)


def higher_is_better(metric):
    return metric == ACCURACY


def day2dark_gap(day_metric, dark_metric, metric=ACCURACY):
    """Positive when the dark partition does worse: day - dark for accuracy,
    dark - day for Hamming distance. ``None`` if either side is missing."""
    if day_metric is None or dark_metric is None:
        return None
    if higher_is_better(metric):
        return float(day_metric - dark_metric)
    return float(dark_metric - day_metric)


# ---------------------------------------------------------------------------
# binned curves


@dataclass
class BinResult:
    lo: float
    hi: float
    n: int
    value: float


@dataclass
class BinnedCurve:
    """Per-bin metric; bins with no samples are simply not listed."""
    metric: str
    edges: list
    bins: list
    overflow: int = 0

    def values(self):
        return {(b.lo, b.hi): b.value for b in self.bins}

    @property
    def total(self):
        return sum(b.n for b in self.bins) + self.overflow


def binned_from_scores(scores, labels, clip_Y, bin_edges, multilabel=False):
    edges = check_edges(bin_edges)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    idx = bin_assign(clip_Y, edges)
    n_bins = len(edges) - 1
    bins = []
    for b in range(n_bins):
        sel = idx == b
        if not sel.any():
            continue
        bins.append(BinResult(float(edges[b]), float(edges[b + 1]), int(sel.sum()),
                              compute_metric(scores[sel], labels[sel], multilabel)))
    return BinnedCurve(metric_name(multilabel), edges.tolist(), bins, int((idx == n_bins).sum()))


def _predict(model, clips):
    fn = getattr(model, "predict", model)
    return np.asarray(fn(clips), dtype=np.float64)


def binned_metric(model, testset, bin_edges, multilabel=None):
    """Evaluate ``model`` (callable or object with ``.predict``, clips -> scores) per illuminance bin."""
    clips = list(testset)
    if multilabel is None:
        multilabel = bool(clips) and np.ndim(clips[0].label) > 0
    scores = _predict(model, clips)
    labels = np.stack([np.asarray(c.label) for c in clips]) if clips else np.zeros(0)
    ys = np.array([c.clip_Y for c in clips], dtype=np.float64)
    return binned_from_scores(scores, labels, ys, bin_edges, multilabel)


def partition_metrics(scores, labels, clip_Y, t=DARK_THRESHOLD, multilabel=False):
    """(day_metric, dark_metric, gap, n_day, n_dark); a missing partition gives ``None``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    dark = np.asarray(clip_Y, dtype=np.float64) <= t
    day_m = compute_metric(scores[~dark], labels[~dark], multilabel) if (~dark).any() else None
    dark_m = compute_metric(scores[dark], labels[dark], multilabel) if dark.any() else None
    return day_m, dark_m, day2dark_gap(day_m, dark_m, metric_name(multilabel)), int((~dark).sum()), int(dark.sum())


# ---------------------------------------------------------------------------
# activation profiles


@dataclass
class ClassProfile:
    channels: list
    matrix: np.ndarray  # (n_bins, n_channels); NaN where the cell is empty
    counts: np.ndarray  # (n_bins,)


@dataclass
class ActivationProfile:
    edges: list
    classes: dict = field(default_factory=dict)

    def to_dict(self):
        return {"edges": list(self.edges), "classes": {
            str(c): {"channels": list(map(int, p.channels)), "counts": p.counts.tolist(),
                     "matrix": [[None if np.isnan(v) else float(v) for v in row] for row in p.matrix]}
            for c, p in self.classes.items()}}

    @classmethod
    def from_dict(cls, d):
        classes = {}
        for c, p in d["classes"].items():
            m = np.array([[np.nan if v is None else v for v in row] for row in p["matrix"]], dtype=np.float64)
            classes[int(c)] = ClassProfile(p["channels"], m.reshape(len(p["counts"]), len(p["channels"])),
                                           np.asarray(p["counts"], dtype=np.int64))
        return cls(list(d["edges"]), classes)


def _clip_activations(encoder, clips, batch_size=64):
    import torch

    out = []
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            frames = torch.from_numpy(np.stack([np.asarray(c.frames) for c in clips[i:i + batch_size]]))
            out.append(encoder(frames.float()).mean(dim=1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, encoder.feature_dims()))


def channel_activation_profile(encoder, dataset, bin_edges, n_channels=50, seed=0, activations=None):
    """Per class: ``n_channels`` seeded channel picks, mean-pooled token activations per clip,
    averaged inside each illuminance bin.

    ``activations`` may carry precomputed (n_clips, d_v) pooled features for ``dataset``.
    """
    clips = list(dataset)
    edges = check_edges(bin_edges)
    feats = _clip_activations(encoder, clips) if activations is None else np.asarray(activations, np.float64)
    d_v = feats.shape[1] if feats.ndim == 2 and feats.shape[0] else encoder.feature_dims()
    if not 1 <= n_channels <= d_v:
        raise InvalidInputError(f"n_channels must be in [1, {d_v}], got {n_channels}")
    labels = np.array([int(np.argmax(c.label)) if np.ndim(c.label) else int(c.label) for c in clips])
    idx = bin_assign([c.clip_Y for c in clips], edges)
    n_bins = len(edges) - 1
    prof = ActivationProfile(edges.tolist())
    for c in sorted(set(labels.tolist())):
        rng = np.random.default_rng([seed, c])
        ch = np.sort(rng.choice(d_v, size=n_channels, replace=False))
        mat = np.full((n_bins, n_channels), np.nan)
        counts = np.zeros(n_bins, dtype=np.int64)
        for b in range(n_bins):
            sel = (labels == c) & (idx == b)
            counts[b] = sel.sum()
            if counts[b]:
                mat[b] = feats[sel][:, ch].mean(axis=0)
        prof.classes[c] = ClassProfile(ch.tolist(), mat, counts)
    return prof


def profile_shift(profile, t=DARK_THRESHOLD):
    """Mean L2 distance between dark-bin and day-bin rows versus between adjacent day bins.

    Returns ``(dark_vs_day, adjacent_day)`` averaged over classes and available cells.
    """
    edges = np.asarray(profile.edges)
    dark_rows = np.where(edges[1:] <= t)[0]
    day_rows = np.where(edges[:-1] >= t)[0]
    cross, adjacent = [], []
    for p in profile.classes.values():
        ok = ~np.isnan(p.matrix).any(axis=1)
        dk = [r for r in dark_rows if ok[r]]
        dy = [r for r in day_rows if ok[r]]
        cross += [np.linalg.norm(p.matrix[a] - p.matrix[b]) for a in dk for b in dy]
        adjacent += [np.linalg.norm(p.matrix[a] - p.matrix[b]) for a, b in zip(dy, dy[1:]) if b == a + 1]
    mean = lambda v: float(np.mean(v)) if v else float("nan")  # noqa: E731
    return mean(cross), mean(adjacent)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    metric: str
    t: float
    overall: dict            # split -> {"value", "n"}
    curve: BinnedCurve
    day_metric: float = None
    dark_metric: float = None
    n_day: int = 0
    n_dark: int = 0
    fingerprints: dict = field(default_factory=dict)
    profile: ActivationProfile = None
    extra: dict = field(default_factory=dict)

    @property
    def day2dark_gap(self):
        return day2dark_gap(self.day_metric, self.dark_metric, self.metric)

    def check(self):
        for name, entry in self.overall.items():
            if name == "test" and self.curve.total != entry["n"]:
                raise InvalidInputError(f"bin counts sum to {self.curve.total}, split has {entry['n']}")
        return self

    def to_dict(self):
        d = {
            "metric": self.metric, "t": self.t, "overall": self.overall,
            "curve": {"metric": self.curve.metric, "edges": self.curve.edges, "overflow": self.curve.overflow,
                      "bins": [asdict(b) for b in self.curve.bins]},
            "day_metric": self.day_metric, "dark_metric": self.dark_metric,
            "n_day": self.n_day, "n_dark": self.n_dark, "day2dark_gap": self.day2dark_gap,
            "fingerprints": self.fingerprints, "extra": self.extra,
        }
        if self.profile is not None:
            d["profile"] = self.profile.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        c = d["curve"]
        curve = BinnedCurve(c["metric"], c["edges"], [BinResult(**b) for b in c["bins"]], c.get("overflow", 0))
        prof = ActivationProfile.from_dict(d["profile"]) if d.get("profile") else None
        return cls(d["metric"], d["t"], d["overall"], curve, d.get("day_metric"), d.get("dark_metric"),
                   d.get("n_day", 0), d.get("n_dark", 0), d.get("fingerprints", {}), prof, d.get("extra", {}))


def build_report(scores, labels, clip_Y, bin_edges, t=DARK_THRESHOLD, multilabel=False, fingerprints=None,
                 split="test", profile=None, extra=None):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    curve = binned_from_scores(scores, labels, clip_Y, bin_edges, multilabel)
    day_m, dark_m, _, n_day, n_dark = partition_metrics(scores, labels, clip_Y, t, multilabel)
    overall = {split: {"value": compute_metric(scores, labels, multilabel), "n": int(len(labels))}}
    return EvalReport(metric_name(multilabel), float(t), overall, curve, day_m, dark_m, n_day, n_dark,
                      dict(fingerprints or {}), profile, dict(extra or {})).check()


def evaluate(model, clips, bin_edges, t=DARK_THRESHOLD, multilabel=None, fingerprints=None):
    """Score ``clips`` with ``model`` and assemble an :class:`EvalReport`."""
    clips = list(clips)
    if not clips:
        raise InvalidInputError("nothing to evaluate")
    if multilabel is None:
        multilabel = np.ndim(clips[0].label) > 0
    scores = _predict(model, clips)
    labels = np.stack([np.asarray(c.label) for c in clips])
    return build_report(scores, labels, [c.clip_Y for c in clips], bin_edges, t, multilabel, fingerprints)


# ---------------------------------------------------------------------------
# files


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _write_if_changed(path, data):
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    if path.exists():
        old = path.read_bytes() if mode == "wb" else path.read_text()
        if old == data:
            return path
    with open(path, mode) as f:
        f.write(data)
    return path


def report_text(report):
    lines = [f"metric: {report.metric}", f"threshold t: {report.t:g}"]
    for split, e in report.overall.items():
        lines.append(f"overall[{split}]: {e['value']:.4f} (n={e['n']})")
    day = "n/a" if report.day_metric is None else f"{report.day_metric:.4f}"
    dark = "n/a" if report.dark_metric is None else f"{report.dark_metric:.4f}"
    gap = report.day2dark_gap
    lines += [f"day (Y > t): {day} (n={report.n_day})", f"dark (Y <= t): {dark} (n={report.n_dark})",
              f"day2dark gap: {'n/a' if gap is None else f'{gap:+.4f}'}", "", "bin            n      value"]
    for b in report.curve.bins:
        lines.append(f"[{b.lo:g}, {b.hi:g})".ljust(14) + f"{b.n:>5d}  {b.value:.4f}")
    if report.curve.overflow:
        lines.append(f"out of range: {report.curve.overflow}")
    if report.fingerprints:
        lines.append("")
        lines += [f"fingerprint[{k}]: {v}" for k, v in sorted(report.fingerprints.items())]
    return "\n".join(lines) + "\n"


def emit_report(report, out_dir, plots=True):
    """Write report.json/report.txt, curve/partition CSVs and PNG plots. Re-running with an
    equal report leaves every file byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [
        _write_if_changed(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"),
        _write_if_changed(out / "report.txt", report_text(report)),
        _write_if_changed(out / "curve.csv", _csv_text(
            ["bin_lo", "bin_hi", "n", report.metric], [(b.lo, b.hi, b.n, b.value) for b in report.curve.bins])),
        _write_if_changed(out / "partition.csv", _csv_text(
            ["partition", "n", report.metric],
            [("day", report.n_day, report.day_metric), ("dark", report.n_dark, report.dark_metric)])),
    ]
    if report.profile is not None:
        rows = []
        for c, p in sorted(report.profile.classes.items()):
            for b in range(p.matrix.shape[0]):
                if p.counts[b]:
                    rows += [(c, report.profile.edges[b], report.profile.edges[b + 1], ch, p.matrix[b, j])
                             for j, ch in enumerate(p.channels)]
        files.append(_write_if_changed(out / "activation_profile.csv",
                                       _csv_text(["class", "bin_lo", "bin_hi", "channel", "activation"], rows)))
    if plots:
        files += render_plots(report, out)
    return files


def _png_bytes(fig):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    return buf.getvalue()


def render_plots(report, out_dir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    files = []
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = [0.5 * (b.lo + b.hi) for b in report.curve.bins]
    ax.plot(xs, [b.value for b in report.curve.bins], marker="o")
    ax.axvline(report.t, color="grey", linestyle="--", linewidth=1)
    ax.set_xlabel("clip illuminance Y")
    ax.set_ylabel(report.metric)
    ax.set_title("metric per illuminance bin")
    fig.tight_layout()
    files.append(_write_if_changed(out / "curve.png", _png_bytes(fig)))
    plt.close(fig)

    if report.profile is not None:
        for c, p in sorted(report.profile.classes.items()):
            fig, ax = plt.subplots(figsize=(6, 3.5))
            im = ax.imshow(np.ma.masked_invalid(p.matrix), aspect="auto", interpolation="nearest", cmap="viridis")
            edges = report.profile.edges
            ax.set_yticks(range(len(edges) - 1))
            ax.set_yticklabels([f"{edges[i]:g}-{edges[i + 1]:g}" for i in range(len(edges) - 1)], fontsize=6)
            ax.set_xlabel("sampled channel")
            ax.set_ylabel("illuminance bin")
            ax.set_title(f"class {c}: mean activation")
            fig.colorbar(im, ax=ax)
            fig.tight_layout()
            files.append(_write_if_changed(out / f"activation_class{c}.png", _png_bytes(fig)))
            plt.close(fig)
    return files


def load_report(path):
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return EvalReport.from_dict(json.loads(p.read_text()))
