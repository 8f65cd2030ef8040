"""Training orchestration: backbone pretraining, stage 1, stage 2, end-to-end.

Backbones are trained once on the labeled set (this is also the visual-only
baseline) and then frozen; their token outputs are cached per split so the
recognizer trains on features. Stage 2 and end-to-end training re-encode the
mixed frames on the fly.
"""
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import yaml
from torch import nn

from .encoders import ToyAudioEncoder, ToyVisualEncoder
from .errors import CheckpointError, ConfigError, PreconditionError
from .illuminance import LUMA_WEIGHTS
from .recognizer import DarknessAdaptiveRecognizer, RecognizerConfig
from .supervision import (AlphaSampler, build_pseudo_targets, classification_loss, filter_unlabeled,
                          loss_end_to_end, loss_stage1)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("stage", "epoch", "total", "ce", "pseudo", "mix", "lr", "steps")


@dataclass
class TrainConfig:
    # optimisation
    momentum: float = 0.9
    batch_size: int = 32
    lr_stage1: float = 0.01
    lr_stage2: float = 0.3
    lam: float = 0.01
    epochs_stage1: int = 10
    epochs_stage2: int = 5
    grad_clip: float = 0.0
    seed: int = 0
    mode: str = "two-stage"
    # recognizer
    K: int = 5
    prompt_len: int = 10
    t: float = 40.0
    d_in: int = 256
    fusion_layers: int = 6
    probe_layers: int = 3
    heads: int = 8
    probe_heads: int = 8
    ffn_mult: int = 4
    adaptive_encoder: bool = True
    adaptive_prompts: bool = True
    adaptive_classifier: bool = True
    tie_day_branch: bool = False
    branch_init_spread: float = 0.1
    stage2_finetune_classifiers: bool = True
    # "all": labeled clips and mixes also train the K-branch path; "routed": illuminance routing only
    dark_path_training: str = "all"
    # backbones
    d_v: int = 64
    d_a: int = 64
    patch: tuple = (2, 8, 8)
    audio_grid: tuple = (4, 4)
    backbone_epochs: int = 15
    backbone_lr: float = 2e-3
    # supervision
    raw_targets: bool = False
    ae_epochs: int = 300
    mix_audio: bool = False
    filter_pool: bool = True
    filter_threshold: float = 0.5

    def __post_init__(self):
        self.patch = tuple(int(v) for v in self.patch)
        self.audio_grid = tuple(int(v) for v in self.audio_grid)

    def validate(self):
        for name in ("lr_stage1", "lr_stage2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.mode not in ("two-stage", "end-to-end"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.dark_path_training not in ("all", "routed"):
            raise ConfigError(f"unknown dark_path_training {self.dark_path_training!r}")
        return self

    @classmethod
    def desk(cls, **overrides):
        """Reduced widths/depths for one CPU core (about two minutes per run), with the stage-2 rate
        and pseudo-loss weight rescaled for this model size."""
        base = dict(d_in=64, fusion_layers=2, probe_layers=1, heads=4, probe_heads=4, ffn_mult=2,
                    d_v=32, d_a=32, patch=(4, 8, 8), epochs_stage1=25, epochs_stage2=8, lr_stage2=0.05,
                    lam=0.001)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        """``preset: desk`` starts from :meth:`desk`; other keys override it."""
        d = dict(d)
        preset = d.pop("preset", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if preset == "desk":
            return cls.desk(**d)
        if preset is not None:
            raise ConfigError(f"unknown preset {preset!r} (only 'desk')")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data.get("train", data))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def recognizer_config(self, n_classes, n_visual_tokens, n_audio_tokens, multilabel=False, pseudo_dim=64):
        return RecognizerConfig(
            n_classes=n_classes, n_visual_tokens=n_visual_tokens, n_audio_tokens=n_audio_tokens,
            d_v=self.d_v, d_a=self.d_a, d_in=self.d_in, K=self.K, prompt_len=self.prompt_len,
            probe_layers=self.probe_layers, probe_heads=self.probe_heads, fusion_layers=self.fusion_layers,
            heads=self.heads, ffn_mult=self.ffn_mult, pseudo_dim=pseudo_dim, multilabel=multilabel,
            adaptive_encoder=self.adaptive_encoder and self.K > 1,
            adaptive_prompts=self.adaptive_prompts,
            adaptive_classifier=self.adaptive_classifier and self.K > 1,
            tie_day_branch=self.tie_day_branch,
            branch_init_spread=self.branch_init_spread,
        )


def _fingerprint(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# backbones


class UnimodalClassifier(nn.Module):
    """Backbone + linear head on mean-pooled tokens (visual-only / audio-only model)."""

    def __init__(self, encoder, n_classes):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.feature_dims(), n_classes)

    def forward(self, x):
        return self.head(self.encoder(x).mean(dim=1))


@dataclass
class Backbones:
    visual: UnimodalClassifier
    audio: UnimodalClassifier
    multilabel: bool = False

    def state(self):
        return {"visual": self.visual.state_dict(), "audio": self.audio.state_dict()}


def _derive_seed(*parts):
    return int(np.random.SeedSequence([abs(hash_int(p)) for p in parts]).generate_state(1)[0])


def hash_int(p):
    if isinstance(p, (int, np.integer)):
        return int(p)
    return int(hashlib.sha256(str(p).encode()).hexdigest()[:8], 16)


def _label_tensor(clips, multilabel):
    if multilabel:
        return torch.from_numpy(np.stack([np.asarray(c.label) for c in clips]).astype(np.float32))
    return torch.tensor([int(c.label) for c in clips], dtype=torch.long)


def _frames_tensor(clips):
    return torch.from_numpy(np.stack([np.asarray(c.frames) for c in clips]))


def _audio_tensor(clips):
    return torch.from_numpy(np.stack([np.asarray(c.audio, dtype=np.float32) for c in clips]))


def make_backbones(config, bench):
    T, H, W = bench.frame_geometry
    v = ToyVisualEncoder((T, H, W), config.patch, config.d_v)
    a = ToyAudioEncoder(bench.sample_rate, config.d_a, config.audio_grid)
    bb = Backbones(UnimodalClassifier(v, bench.n_classes), UnimodalClassifier(a, bench.n_classes),
                   multilabel=bench.multilabel)
    bb.visual._multilabel = bb.audio._multilabel = bench.multilabel
    return bb


def _train_unimodal(model, inputs, labels, config, multilabel, seed, tag):
    opt = torch.optim.Adam(model.parameters(), lr=config.backbone_lr)
    n = inputs.shape[0]
    for epoch in range(config.backbone_epochs):
        torch.manual_seed(_derive_seed(seed, tag, epoch))
        perm = torch.randperm(n, generator=torch.Generator().manual_seed(_derive_seed(seed, tag, "perm", epoch)))
        total = 0.0
        for idx in perm.split(config.batch_size):
            loss = classification_loss(model(inputs[idx]), labels[idx], multilabel)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.debug("%s epoch %d loss %.4f", tag, epoch, total / n)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def pretrain_backbones(config, dataset):
    """Train the visual-only and audio-only models on the labeled set, then freeze them."""
    bench = dataset.config
    torch.manual_seed(_derive_seed(config.seed, "backbone-init"))
    bb = make_backbones(config, bench)
    labels = _label_tensor(dataset.train, bench.multilabel)
    _train_unimodal(bb.visual, _frames_tensor(dataset.train).float(), labels, config, bench.multilabel,
                    config.seed, "visual")
    spec = bb.audio.encoder.spectrogram(_audio_tensor(dataset.train))
    audio_model = _SpectrogramView(bb.audio)
    _train_unimodal(audio_model, spec, labels, config, bench.multilabel, config.seed, "audio")
    return bb


class _SpectrogramView(nn.Module):
    """Trains the audio model on precomputed spectrograms."""

    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, spec):
        return self.model.head(self.model.encoder.encode_spectrogram(spec).mean(dim=1))


def unimodal_predict(model, clips, modality, batch_size=128):
    """Class probabilities of a frozen unimodal model for a list of clips."""
    multilabel = getattr(model, "_multilabel", False)
    out = []
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            chunk = clips[i:i + batch_size]
            x = _frames_tensor(chunk).float() if modality == "visual" else _audio_tensor(chunk)
            logits = model(x)
            out.append(torch.sigmoid(logits) if multilabel else torch.softmax(logits, -1))
    return torch.cat(out).numpy() if out else np.zeros((0, model.head.out_features))


# ---------------------------------------------------------------------------
# feature banks


@dataclass
class FeatureBank:
    ids: list
    F: torch.Tensor
    A: torch.Tensor
    Y: torch.Tensor
    labels: torch.Tensor = None
    frames: torch.Tensor = None
    audio: torch.Tensor = None

    def __len__(self):
        return len(self.ids)


def encode_frames(backbones, frames, batch_size=128):
    enc = backbones.visual.encoder
    with torch.no_grad():
        return torch.cat([enc(frames[i:i + batch_size].float()) for i in range(0, frames.shape[0], batch_size)]) \
            if frames.shape[0] else torch.zeros(0, *_token_shape(enc))


def encode_waveforms(backbones, audio, batch_size=128):
    enc = backbones.audio.encoder
    with torch.no_grad():
        return torch.cat([enc(audio[i:i + batch_size]) for i in range(0, audio.shape[0], batch_size)]) \
            if audio.shape[0] else torch.zeros(0, *_token_shape(enc))


def _token_shape(enc):
    return (int(np.prod(enc.token_layout())), enc.feature_dims())


def build_bank(backbones, clips, labeled=True, keep_raw=False, multilabel=False):
    frames = _frames_tensor(clips) if clips else torch.zeros(0, dtype=torch.uint8)
    audio = _audio_tensor(clips) if clips else torch.zeros(0)
    bank = FeatureBank(
        ids=[c.clip_id for c in clips],
        F=encode_frames(backbones, frames),
        A=encode_waveforms(backbones, audio),
        Y=torch.tensor([c.clip_Y for c in clips], dtype=torch.float64),
        labels=_label_tensor(clips, multilabel) if (labeled and clips) else None,
    )
    if keep_raw:
        bank.frames, bank.audio = frames, audio
    return bank


@dataclass
class Prepared:
    config: TrainConfig
    bench: object
    backbones: Backbones
    banks: dict
    pool_clips: list
    pseudo: object = None

    @property
    def multilabel(self):
        return self.bench.multilabel

    def recognizer_config(self):
        pdim = self.pseudo.dim if self.pseudo is not None else 64
        return self.config.recognizer_config(self.bench.n_classes, self.banks["train"].F.shape[1],
                                             self.banks["train"].A.shape[1], self.multilabel, pdim)


def prepare(config, dataset, backbones=None, pseudo_cache=None):
    """Pretrain (or reuse) backbones, filter the pool, cache features and pseudo-targets."""
    config.validate()
    if backbones is None:
        backbones = pretrain_backbones(config, dataset)
    pool = list(dataset.pool)
    if config.filter_pool and pool:
        pool = filter_unlabeled(pool, lambda clips: unimodal_predict(backbones.visual, clips, "visual"),
                                config.filter_threshold)
        log.info("pool filter kept %d of %d clips", len(pool), len(dataset.pool))
    ml = dataset.config.multilabel
    banks = {
        "train": build_bank(backbones, dataset.train, keep_raw=True, multilabel=ml),
        "val": build_bank(backbones, dataset.val, multilabel=ml),
        "test": build_bank(backbones, dataset.test, multilabel=ml),
        "pool": build_bank(backbones, pool, labeled=False, keep_raw=True),
    }
    pseudo = build_pseudo_targets(pool, raw=config.raw_targets, cache_path=pseudo_cache,
                                  ae_epochs=config.ae_epochs, seed=config.seed)
    return Prepared(config, dataset.config, backbones, banks, pool, pseudo)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    fingerprint: str
    train_config: dict
    recognizer_config: dict
    recognizer_state: dict
    optimizer_state: dict = None
    backbone_state: dict = None
    bench_config: dict = None
    history: list = field(default_factory=list)

    def build_model(self):
        model = DarknessAdaptiveRecognizer(RecognizerConfig.from_dict(self.recognizer_config))
        model.load_state_dict(self.recognizer_state)
        return model


def model_fingerprint(rcfg, t):
    return _fingerprint({"recognizer": asdict(rcfg), "t": t, "version": CHECKPOINT_VERSION})


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": CHECKPOINT_VERSION, **asdict(ckpt)}, path)
    return path


def load_checkpoint(path, expected_fingerprint=None):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.pop("format_version", None) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    ckpt = Checkpoint(**blob)
    rcfg = RecognizerConfig.from_dict(ckpt.recognizer_config)
    if ckpt.fingerprint != model_fingerprint(rcfg, ckpt.train_config.get("t", 40.0)):
        raise CheckpointError(f"{path}: stored fingerprint does not match its own config")
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"{path}: fingerprint {ckpt.fingerprint} does not match expected {expected_fingerprint}")
    return ckpt


def params_hash(model, names=None):
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        if names is None or k in names:
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training loops


def _set_trainable(model, names):
    names = set(names)
    for k, p in model.named_parameters():
        p.requires_grad_(k in names)
    return [p for k, p in model.named_parameters() if k in names]


def stage2_trainable(model, config):
    return model.dark_adaptive_parameter_names(include_classifiers=config.stage2_finetune_classifiers)


def _step(opt, params, loss, grad_clip):
    opt.zero_grad()
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    opt.step()


def _luma(frames):
    w = torch.tensor(LUMA_WEIGHTS, dtype=torch.float64)
    return (frames.to(torch.float64) @ w).mean(dim=(1, 2, 3))


def mix_batch(prep, lab_idx, pool_idx, alphas):
    """Day2dark-mix a labeled batch with pool clips: frames mixed, labeled audio kept."""
    tr, pool = prep.banks["train"], prep.banks["pool"]
    a = torch.as_tensor(alphas, dtype=torch.float64)[:, None, None, None, None]
    frames = a * tr.frames[lab_idx].to(torch.float64) + (1 - a) * pool.frames[pool_idx].to(torch.float64)
    Y = _luma(frames)
    F = encode_frames(prep.backbones, frames.float())
    if prep.config.mix_audio:
        aw = a[:, 0, 0, 0, 0].float()[:, None]
        A = encode_waveforms(prep.backbones, aw * tr.audio[lab_idx] + (1 - aw) * pool.audio[pool_idx])
    else:
        A = tr.A[lab_idx]
    return F, A, Y, tr.labels[lab_idx]


class Trainer:
    """Runs one stage; holds model, optimizer and the per-epoch log."""

    def __init__(self, prep, stage, model, trainable, lr, history=None, optimizer_state=None):
        self.prep = prep
        self.stage = stage
        self.model = model
        self.params = _set_trainable(model, trainable)
        self.trainable = list(trainable)
        self.lr = lr
        self.opt = torch.optim.SGD(self.params, lr=lr, momentum=prep.config.momentum)
        if optimizer_state is not None:
            self.opt.load_state_dict(optimizer_state)
        self.history = list(history or [])

    @property
    def cfg(self):
        return self.prep.config

    def _targets(self, idx):
        pool = self.prep.banks["pool"]
        tg = self.prep.pseudo.targets
        missing = [pool.ids[i] for i in idx if pool.ids[i] not in tg]
        if missing:
            raise PreconditionError(f"missing pseudo-targets for pool clips: {missing[:10]}")
        return torch.from_numpy(np.stack([tg[pool.ids[i]] for i in idx]))

    def _orders(self, epoch):
        seed = self.cfg.seed
        n_lab = len(self.prep.banks["train"])
        n_pool = len(self.prep.banks["pool"])
        lab = torch.randperm(n_lab, generator=torch.Generator().manual_seed(
            _derive_seed(seed, self.stage, "lab", epoch)))
        pool = torch.randperm(n_pool, generator=torch.Generator().manual_seed(
            _derive_seed(seed, self.stage, "pool", epoch))) if n_pool else None
        alpha = AlphaSampler(_derive_seed(seed, self.stage, "alpha", epoch))
        mixpool = np.random.default_rng(_derive_seed(seed, self.stage, "mixpool", epoch))
        return lab, pool, alpha, mixpool

    def run_epoch(self, epoch):
        cfg, prep, model = self.cfg, self.prep, self.model
        torch.manual_seed(_derive_seed(cfg.seed, self.stage, "torch", epoch))
        tr, pool = prep.banks["train"], prep.banks["pool"]
        lab, pool_order, alpha, mixpool = self._orders(epoch)
        bs = cfg.batch_size
        use_pool = self.stage in ("stage1", "e2e") and cfg.lam > 0 and len(pool) > 0
        use_mix = (self.stage == "stage2" or self.stage == "e2e") and len(pool) > 0
        both_paths = cfg.dark_path_training == "all" and self.stage != "stage2"
        mix_force = True if cfg.dark_path_training == "all" else None
        sums = dict(total=0.0, ce=0.0, pseudo=0.0, mix=0.0)
        steps = 0
        model.train()
        for s, idx in enumerate(lab.split(bs)):
            pidx = None
            if use_pool:
                pidx = pool_order[torch.arange(s * bs, s * bs + bs) % len(pool)]
            F, A, Y = tr.F[idx], tr.A[idx], tr.Y[idx]
            labels = tr.labels[idx]
            force = torch.zeros(len(idx), dtype=torch.bool)
            if both_paths:
                # second pass of the day-lit labeled clips through the K-branch path
                extra = idx[tr.Y[idx] > cfg.t]
                F, A, Y = torch.cat([F, tr.F[extra]]), torch.cat([A, tr.A[extra]]), torch.cat([Y, tr.Y[extra]])
                labels = torch.cat([labels, tr.labels[extra]])
                force = torch.cat([force, torch.ones(len(extra), dtype=torch.bool)])
            n = len(labels)
            if pidx is not None:
                F, A, Y = torch.cat([F, pool.F[pidx]]), torch.cat([A, pool.A[pidx]]), torch.cat([Y, pool.Y[pidx]])
                force = torch.cat([force, torch.zeros(len(pidx), dtype=torch.bool)])

            if self.stage == "stage2":
                if not use_mix:
                    break
                m_pool = torch.from_numpy(mixpool.integers(0, len(pool), size=len(idx)))
                Fm, Am, Ym, ym = mix_batch(prep, idx, m_pool, alpha.sample(len(idx)))
                out = model(Fm, Am, Ym, cfg.t, force_dark=mix_force)
                mix = classification_loss(out.logits, ym, prep.multilabel)
                total, parts = mix, dict(ce=0.0, pseudo=0.0, mix=mix.item())
            else:
                out = model(F, A, Y, cfg.t, force_dark=force)
                q_hat = out.q_hat[n:]
                q = self._targets(pidx.tolist()) if pidx is not None else q_hat.new_zeros((0, q_hat.shape[1]))
                if self.stage == "e2e":
                    if use_mix:
                        m_pool = torch.from_numpy(mixpool.integers(0, len(pool), size=len(idx)))
                        Fm, Am, Ym, ym = mix_batch(prep, idx, m_pool, alpha.sample(len(idx)))
                        mixed_logits = model(Fm, Am, Ym, cfg.t, force_dark=mix_force).logits
                    else:
                        mixed_logits, ym = out.logits[:0], labels[:0]
                    total, ce, lu, mix = loss_end_to_end(out.logits[:n], labels, q_hat, q, mixed_logits,
                                                         ym, cfg.lam if use_pool else 0.0, prep.multilabel)
                else:
                    total, ce, lu = loss_stage1(out.logits[:n], labels, q_hat, q,
                                                cfg.lam if use_pool else 0.0, prep.multilabel)
                    mix = ce.new_zeros(())
                parts = dict(ce=ce.item(), pseudo=lu.item(), mix=mix.item())
            _step(self.opt, self.params, total, cfg.grad_clip)
            steps += 1
            sums["total"] += total.item()
            for k, v in parts.items():
                sums[k] += v
        model.eval()
        row = {"stage": self.stage, "epoch": epoch, "steps": steps, "lr": self.lr}
        row.update({k: (v / steps if steps else 0.0) for k, v in sums.items()})
        self.history.append(row)
        return row

    def checkpoint(self, epoch):
        rcfg = self.model.config
        return Checkpoint(
            stage=self.stage, epoch=epoch, fingerprint=model_fingerprint(rcfg, self.cfg.t),
            train_config=self.cfg.to_dict(), recognizer_config=asdict(rcfg),
            recognizer_state={k: v.clone() for k, v in self.model.state_dict().items()},
            optimizer_state=_clone_state(self.opt.state_dict()), backbone_state=self.prep.backbones.state(),
            bench_config=self.prep.bench.to_dict(), history=list(self.history))


def _clone_state(sd):
    def rec(x):
        if isinstance(x, torch.Tensor):
            return x.clone()
        if isinstance(x, dict):
            return {k: rec(v) for k, v in x.items()}
        if isinstance(x, list):
            return [rec(v) for v in x]
        return x
    return rec(sd)


def new_model(prep):
    torch.manual_seed(_derive_seed(prep.config.seed, "recognizer-init"))
    return DarknessAdaptiveRecognizer(prep.recognizer_config())


def _run(prep, stage, epochs, model, trainable, lr, resume=None, log_path=None):
    start = 0
    history, opt_state = [], None
    if resume is not None:
        if resume.stage != stage:
            raise CheckpointError(f"cannot resume {stage} from a {resume.stage} checkpoint")
        expected = model_fingerprint(model.config, prep.config.t)
        if resume.fingerprint != expected:
            raise CheckpointError(f"fingerprint {resume.fingerprint} does not match config {expected}")
        model.load_state_dict(resume.recognizer_state)
        start, history, opt_state = resume.epoch, resume.history, resume.optimizer_state
    trainer = Trainer(prep, stage, model, trainable, lr, history, opt_state)
    for epoch in range(start, epochs):
        row = trainer.run_epoch(epoch)
        log.info("%s epoch %d: total %.4f ce %.4f pseudo %.4f mix %.4f", stage, epoch, row["total"], row["ce"],
                 row["pseudo"], row["mix"])
    ckpt = trainer.checkpoint(max(epochs, start))
    if log_path is not None:
        write_log(ckpt.history, log_path)
    return ckpt


def train_stage1(prep, epochs=None, resume=None, log_path=None):
    """Labeled CE + lambda * L1 to pseudo-targets on the pool; all recognizer params train."""
    model = new_model(prep)
    _check_targets(prep)
    names = [k for k, _ in model.named_parameters()]
    return _run(prep, "stage1", prep.config.epochs_stage1 if epochs is None else epochs, model, names,
                prep.config.lr_stage1, resume, log_path)


def train_stage2(prep, stage1_checkpoint, epochs=None, resume=None, log_path=None):
    """Day2dark-mix finetuning of the darkness-adaptive parts; the fusion transformer stays frozen."""
    model = new_model(prep)
    expected = model_fingerprint(model.config, prep.config.t)
    if stage1_checkpoint.fingerprint != expected:
        raise CheckpointError(
            f"stage-1 checkpoint fingerprint {stage1_checkpoint.fingerprint} does not match config {expected}")
    model.load_state_dict(stage1_checkpoint.recognizer_state)
    epochs = prep.config.epochs_stage2 if epochs is None else epochs
    if epochs == 0 and resume is None:
        return replace(stage1_checkpoint, history=list(stage1_checkpoint.history))
    trainable = stage2_trainable(model, prep.config)
    history = stage1_checkpoint.history if resume is None else None
    ckpt = _run(prep, "stage2", epochs, model, trainable, prep.config.lr_stage2, resume, None)
    if history is not None:
        ckpt.history = list(history) + ckpt.history
    if log_path is not None:
        write_log(ckpt.history, log_path)
    return ckpt


def train_end_to_end(prep, epochs=None, resume=None, log_path=None):
    """CE + lambda * L_U + CE on mixed samples, all at once."""
    model = new_model(prep)
    _check_targets(prep)
    names = [k for k, _ in model.named_parameters()]
    return _run(prep, "e2e", prep.config.epochs_stage1 if epochs is None else epochs, model, names,
                prep.config.lr_stage1, resume, log_path)


def _check_targets(prep):
    if prep.config.lam > 0 and prep.pool_clips:
        missing = [c.clip_id for c in prep.pool_clips if c.clip_id not in prep.pseudo.targets]
        if missing:
            raise PreconditionError(f"missing pseudo-targets for pool clips: {missing[:10]}")


def train(prep, log_path=None):
    """Full schedule for ``prep.config.mode``; returns the final checkpoint."""
    if prep.config.mode == "end-to-end":
        return train_end_to_end(prep, log_path=log_path)
    return train_stage2(prep, train_stage1(prep), log_path=log_path)


def write_log(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k) for k in LOG_COLUMNS})


# ---------------------------------------------------------------------------
# inference


def predict_bank(model, bank, t=40.0, batch_size=256):
    """Logits, branch attention and path mask for every clip in a feature bank."""
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(bank), batch_size):
            sl = slice(i, i + batch_size)
            outs.append(model(bank.F[sl], bank.A[sl], bank.Y[sl], t))
    if not outs:
        return None
    return (torch.cat([o.logits for o in outs]), torch.cat([o.beta for o in outs]),
            torch.cat([o.dark for o in outs]))


def restore_backbones(ckpt):
    from .toybench import BenchConfig

    cfg = TrainConfig.from_dict(ckpt.train_config)
    bench = BenchConfig.from_dict(ckpt.bench_config)
    bb = make_backbones(cfg, bench)
    bb.visual.load_state_dict(ckpt.backbone_state["visual"])
    bb.audio.load_state_dict(ckpt.backbone_state["audio"])
    for m in (bb.visual, bb.audio):
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    return bb, cfg, bench
