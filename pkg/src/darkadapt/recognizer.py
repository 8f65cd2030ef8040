"""Darkness-adaptive audio-visual recognizer.

Dark clips (``clip_Y <= t``) go through the darkness probe, which produces a
branch attention ``beta`` over K branches. ``beta`` weights K visual
projections, K prompt blocks and K classifiers. Day clips use a single
projection/prompt/classifier. Both paths share the audio projection, the
fusion transformer and the pseudo-label head.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from .errors import ConfigError, ShapeError

STATIC_PROMPT_LEN = 2  # class token + pseudo-label token when adaptive prompts are off


@dataclass
class RecognizerConfig:
    n_classes: int = 8
    n_visual_tokens: int = 64
    n_audio_tokens: int = 16
    d_v: int = 64
    d_a: int = 64
    d_in: int = 256
    K: int = 5
    prompt_len: int = 10
    probe_layers: int = 3
    probe_heads: int = 8
    fusion_layers: int = 6
    heads: int = 8
    ffn_mult: int = 4
    pseudo_dim: int = 64
    dropout: float = 0.0
    multilabel: bool = False
    adaptive_encoder: bool = True
    adaptive_prompts: bool = True
    adaptive_classifier: bool = True
    tie_day_branch: bool = False
    # branches start as one shared draw plus this fraction of an independent one
    branch_init_spread: float = 0.1

    def validate(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.prompt_len < 2:
            raise ConfigError("prompt_len must be >= 2 (class token and pseudo-label token)")
        if self.branch_init_spread < 0:
            raise ConfigError("branch_init_spread must be >= 0")
        if self.d_in % self.heads or self.d_v % self.probe_heads:
            raise ConfigError("model widths must be divisible by their head counts")
        return self

    def branches(self, part):
        on = {"encoder": self.adaptive_encoder, "prompt": self.adaptive_prompts,
              "classifier": self.adaptive_classifier}[part]
        return self.K if on else 1

    @property
    def seq_prompt_len(self):
        return self.prompt_len if self.adaptive_prompts else STATIC_PROMPT_LEN

    @property
    def seq_len(self):
        return self.n_visual_tokens + self.n_audio_tokens + self.seq_prompt_len

    def fingerprint(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class RecognizerOutput:
    logits: torch.Tensor  # (B, n)
    q_hat: torch.Tensor  # (B, pseudo_dim)
    beta: torch.Tensor  # (B, K); one-hot at 0 on the day path
    dark: torch.Tensor  # (B,) bool

    @property
    def path(self):
        return ["dark" if d else "day" for d in self.dark.tolist()]

    def probabilities(self, multilabel=False):
        return torch.sigmoid(self.logits) if multilabel else torch.softmax(self.logits, -1)


# ---------------------------------------------------------------------------
# functional pieces (shape-checked; used by the module and exercised directly)


def adaptive_encode(F, beta, E_v):
    """``V = sum_k beta_k F E^v_k``.  F: (B, n_v, d_v), beta: (B, K), E_v: (K, d_v, d_in)."""
    if F.shape[-1] != E_v.shape[1] or beta.shape[-1] != E_v.shape[0]:
        raise ShapeError(f"adaptive_encode: F {tuple(F.shape)}, beta {tuple(beta.shape)}, E_v {tuple(E_v.shape)}")
    return _mix(beta, torch.stack([F @ E_v[k] for k in range(E_v.shape[0])], 1))


def generate_prompt(beta, prompts):
    """``O = sum_k beta_k O_k``.  beta: (B, K), prompts: (K, l, d_in)."""
    if beta.shape[-1] != prompts.shape[0]:
        raise ShapeError(f"generate_prompt: beta {tuple(beta.shape)} vs prompts {tuple(prompts.shape)}")
    return torch.einsum("bk,kld->bld", beta, prompts)


def branch_logits(token, W, b):
    """Per-branch logits ``y_k``: token (B, d_in), W (K, d_in, n), b (K, n) -> (B, K, n)."""
    if token.shape[-1] != W.shape[1]:
        raise ShapeError(f"classifier input dim {W.shape[1]} does not match token dim {token.shape[-1]}")
    return torch.stack([token @ W[k] + b[k] for k in range(W.shape[0])], 1)


def classify(fused_tokens, beta, W, b, token_index):
    """``y = sum_k beta_k g_k(token)`` reading the designated class token."""
    if beta.shape[-1] != W.shape[0]:
        raise ShapeError(f"classify: beta {tuple(beta.shape)} vs {W.shape[0]} heads")
    y_k = branch_logits(fused_tokens[:, token_index], W, b)
    return _mix(beta, y_k)


def _mix(beta, per_branch):
    # per-branch maps are computed exactly as the single-branch path does, so a
    # weight of exactly 1 reproduces that path bit for bit
    w = beta.reshape(*beta.shape, *([1] * (per_branch.dim() - 2)))
    return (w.to(per_branch.dtype) * per_branch).sum(1)


def _ones(B, ref):
    return torch.ones(B, 1, dtype=ref.dtype, device=ref.device)


def _branch_init(K, shape, std, spread):
    """K near-copies of one normal draw; each branch keeps standard deviation ``std``.

    Independent draws would make every shift of beta mix in untrained differences
    between branches, so the branches start close and diverge only through training.
    """
    shared = torch.randn(1, *shape)
    own = torch.randn(K, *shape)
    return std * (shared + spread * own) / (1 + spread ** 2) ** 0.5


class DarknessProbe(nn.Module):
    """ViT-style transformer over visual tokens, mean-pooled into K branch logits."""

    def __init__(self, n_tokens, d_v, K, layers=3, heads=8, ffn_mult=4, dropout=0.0):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(n_tokens, d_v))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(d_v, heads, ffn_mult * d_v, dropout, activation="gelu",
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d_v)
        self.head = nn.Linear(d_v, K)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.K = K

    def logits(self, F):
        h = self.blocks(F + self.pos)
        return self.head(self.norm(h).mean(dim=1))

    def forward(self, F):
        return torch.softmax(self.logits(F), dim=-1)


class FusionTransformer(nn.Module):
    def __init__(self, seq_len, d_in, layers=6, heads=8, ffn_mult=4, dropout=0.0):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(seq_len, d_in))
        self.segment = nn.Parameter(torch.zeros(3, d_in))
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.segment, std=0.02)
        layer = nn.TransformerEncoderLayer(d_in, heads, ffn_mult * d_in, dropout, activation="gelu",
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d_in)
        self.seq_len = seq_len

    def forward(self, V, A, O):
        d = self.pos.shape[1]
        for name, x in (("V", V), ("A", A), ("O", O)):
            if x.shape[-1] != d:
                raise ShapeError(f"fusion input {name} has dim {x.shape[-1]}, expected d_in={d}")
        seg = torch.cat([
            self.segment[0].expand(V.shape[1], d),
            self.segment[1].expand(A.shape[1], d),
            self.segment[2].expand(O.shape[1], d),
        ])
        x = torch.cat([V, A, O], dim=1)
        if x.shape[1] != self.seq_len:
            raise ShapeError(f"fusion sequence length {x.shape[1]} != configured {self.seq_len}")
        return self.norm(self.blocks(x + self.pos + seg))


class DarknessAdaptiveRecognizer(nn.Module):
    """All learnable recognizer state; backbones live outside."""

    FUSION_PREFIX = "fusion."

    def __init__(self, config):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        K, d_v, d_in, n = cfg.K, cfg.d_v, cfg.d_in, cfg.n_classes
        Kp, Kq, Kc = cfg.branches("encoder"), cfg.branches("prompt"), cfg.branches("classifier")
        lp = cfg.seq_prompt_len

        self.probe = DarknessProbe(cfg.n_visual_tokens, d_v, K, cfg.probe_layers, cfg.probe_heads,
                                   cfg.ffn_mult, cfg.dropout)
        spread = cfg.branch_init_spread
        self.E_v = nn.Parameter(_branch_init(Kp, (d_v, d_in), d_v ** -0.5, spread))
        self.prompts = nn.Parameter(_branch_init(Kq, (lp, d_in), 0.02, spread))
        self.E_a = nn.Parameter(torch.randn(cfg.d_a, d_in) / cfg.d_a ** 0.5)
        self.fusion = FusionTransformer(cfg.seq_len, d_in, cfg.fusion_layers, cfg.heads, cfg.ffn_mult,
                                        cfg.dropout)
        self.cls_W = nn.Parameter(_branch_init(Kc, (d_in, n), 0.02, spread))
        self.cls_b = nn.Parameter(torch.zeros(Kc, n))
        self.pseudo_head = nn.Linear(d_in, cfg.pseudo_dim)
        if not cfg.tie_day_branch:
            self.E_v_day = nn.Parameter(torch.randn(d_v, d_in) / d_v ** 0.5)
            self.prompt_day = nn.Parameter(0.02 * torch.randn(lp, d_in))
            self.cls_W_day = nn.Parameter(torch.randn(d_in, n) * 0.02)
            self.cls_b_day = nn.Parameter(torch.zeros(n))

    # -- parameter groups --------------------------------------------------

    def fusion_parameter_names(self):
        return [k for k, _ in self.named_parameters() if k.startswith(self.FUSION_PREFIX)]

    def dark_adaptive_parameter_names(self, include_classifiers=True):
        names = []
        for k, _ in self.named_parameters():
            if k.startswith("probe.") or k in ("E_v", "prompts"):
                names.append(k)
            elif include_classifiers and k in ("cls_W", "cls_b"):
                names.append(k)
        return names

    # -- pieces ------------------------------------------------------------

    @property
    def class_token_index(self):
        return self.config.n_visual_tokens + self.config.n_audio_tokens

    def darkness_probe(self, F):
        if self.probe.K != self.config.K:
            raise ConfigError(f"probe emits {self.probe.K} logits but K={self.config.K}")
        return self.probe(F)

    def _sub_beta(self, beta, n_branches):
        return beta if n_branches == beta.shape[-1] else _ones(beta.shape[0], beta)

    def _day_params(self):
        if self.config.tie_day_branch:
            return self.E_v[0], self.prompts[0], self.cls_W[0], self.cls_b[0]
        return self.E_v_day, self.prompt_day, self.cls_W_day, self.cls_b_day

    def fuse(self, V, A, O):
        return self.fusion(V, A, O)

    # -- forward -----------------------------------------------------------

    def forward(self, F, A_prime, clip_Y, t=40.0, force_dark=None):
        """``F``: (B, n_v, d_v) visual tokens; ``A_prime``: (B, n_a, d_a) audio tokens;
        ``clip_Y``: (B,) illuminance. Returns a :class:`RecognizerOutput`.

        ``force_dark`` (bool (B,) mask or True) sends those samples down the
        K-branch path whatever their illuminance; training uses it, inference does not.
        """
        B = F.shape[0]
        clip_Y = torch.as_tensor(clip_Y, dtype=torch.float64).reshape(B)
        dark = clip_Y <= t
        if force_dark is not None:
            dark = dark | torch.as_tensor(force_dark, dtype=torch.bool).expand(B)

        beta_dark = self.darkness_probe(F)
        beta_day = torch.zeros_like(beta_dark)
        beta_day[:, 0] = 1.0
        beta = torch.where(dark[:, None], beta_dark, beta_day)

        E_day, O_day, W_day, b_day = self._day_params()
        V_dark = adaptive_encode(F, self._sub_beta(beta_dark, self.E_v.shape[0]), self.E_v)
        V_day = F @ E_day
        O_dark = generate_prompt(self._sub_beta(beta_dark, self.prompts.shape[0]), self.prompts)
        O_day = O_day.expand(B, *O_day.shape)
        m = dark[:, None, None]
        V = torch.where(m, V_dark, V_day)
        O = torch.where(m, O_dark, O_day)
        A = A_prime @ self.E_a

        tokens = self.fuse(V, A, O)
        idx = self.class_token_index
        y_dark = classify(tokens, self._sub_beta(beta_dark, self.cls_W.shape[0]), self.cls_W, self.cls_b, idx)
        y_day = tokens[:, idx] @ W_day + b_day
        logits = torch.where(dark[:, None], y_dark, y_day)
        q_hat = self.pseudo_head(tokens[:, idx + 1])
        return RecognizerOutput(logits=logits, q_hat=q_hat, beta=beta, dark=dark)

    def branch_outputs(self, F, A_prime):
        """Dark-path per-branch logits ``(B, Kc, n)`` and ``beta``, for inspection."""
        beta = self.darkness_probe(F)
        V = adaptive_encode(F, self._sub_beta(beta, self.E_v.shape[0]), self.E_v)
        O = generate_prompt(self._sub_beta(beta, self.prompts.shape[0]), self.prompts)
        tokens = self.fuse(V, A_prime @ self.E_a, O)
        return branch_logits(tokens[:, self.class_token_index], self.cls_W, self.cls_b), beta


def ladder_configs(base):
    """Component ladder: vanilla -> +probe/adaptive encoder -> +adaptive prompts -> +adaptive classifiers."""
    from dataclasses import replace

    vanilla = replace(base, K=1, adaptive_encoder=False, adaptive_prompts=False, adaptive_classifier=False,
                      tie_day_branch=True)
    enc = replace(base, adaptive_encoder=True, adaptive_prompts=False, adaptive_classifier=False,
                  tie_day_branch=False)
    prm = replace(enc, adaptive_prompts=True)
    full = replace(prm, adaptive_classifier=True)
    return [("vanilla", vanilla), ("+probe/adaptive encoder", enc), ("+adaptive prompts", prm),
            ("+adaptive classification", full)]
