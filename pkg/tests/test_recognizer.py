import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from darkadapt.errors import ConfigError, ShapeError
from darkadapt.recognizer import (DarknessAdaptiveRecognizer, DarknessProbe, FusionTransformer, RecognizerConfig,
                                  adaptive_encode, branch_logits, classify, generate_prompt, ladder_configs)


def small_config(**over):
    base = dict(n_classes=5, n_visual_tokens=6, n_audio_tokens=4, d_v=8, d_a=6, d_in=8, K=3, prompt_len=4,
                probe_layers=1, probe_heads=2, fusion_layers=1, heads=2, ffn_mult=2, pseudo_dim=64)
    base.update(over)
    return RecognizerConfig(**base)


def inputs(cfg, B=4, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    F = torch.randn(B, cfg.n_visual_tokens, cfg.d_v, generator=g, dtype=dtype)
    A = torch.randn(B, cfg.n_audio_tokens, cfg.d_a, generator=g, dtype=dtype)
    return F, A


# -- independent transformer oracle ---------------------------------------


def _ln(x, mod):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + mod.eps) * mod.weight + mod.bias


def _gelu(x):
    return 0.5 * x * (1 + torch.erf(x / math.sqrt(2)))


def _layer(x, layer):
    att = layer.self_attn
    d = x.shape[-1]
    h = att.num_heads
    hd = d // h
    y = _ln(x, layer.norm1)
    w, b = att.in_proj_weight, att.in_proj_bias
    q = y @ w[:d].T + b[:d]
    k = y @ w[d:2 * d].T + b[d:2 * d]
    v = y @ w[2 * d:].T + b[2 * d:]
    heads = []
    for i in range(h):
        s = slice(i * hd, (i + 1) * hd)
        scores = q[..., s] @ k[..., s].transpose(-1, -2) / math.sqrt(hd)
        heads.append(torch.softmax(scores, -1) @ v[..., s])
    x = x + torch.cat(heads, -1) @ att.out_proj.weight.T + att.out_proj.bias
    y = _ln(x, layer.norm2)
    return x + _gelu(y @ layer.linear1.weight.T + layer.linear1.bias) @ layer.linear2.weight.T + layer.linear2.bias


def probe_oracle(probe, F):
    x = F + probe.pos
    for layer in probe.blocks.layers:
        x = _layer(x, layer)
    pooled = _ln(x, probe.norm).mean(1)
    z = pooled @ probe.head.weight.T + probe.head.bias
    e = torch.exp(z - z.max(-1, keepdim=True).values)
    return e / e.sum(-1, keepdim=True)


def fusion_oracle(fusion, V, A, O):
    seg = torch.cat([fusion.segment[0].repeat(V.shape[1], 1), fusion.segment[1].repeat(A.shape[1], 1),
                     fusion.segment[2].repeat(O.shape[1], 1)])
    x = torch.cat([V, A, O], 1) + fusion.pos + seg
    for layer in fusion.blocks.layers:
        x = _layer(x, layer)
    return _ln(x, fusion.norm)


# -- probe ------------------------------------------------------------------


def test_zero_head_gives_uniform_beta():
    probe = DarknessProbe(6, 8, K=4, layers=1, heads=2)
    beta = probe(torch.randn(3, 6, 8))
    assert torch.allclose(beta, torch.full((3, 4), 0.25))


def test_probe_matches_oracle():
    torch.manual_seed(0)
    probe = DarknessProbe(6, 8, K=3, layers=2, heads=2)
    torch.nn.init.normal_(probe.head.weight)
    torch.nn.init.normal_(probe.head.bias)
    probe.eval()
    F = torch.randn(2, 6, 8)
    with torch.no_grad():
        a, b = probe(F), probe_oracle(probe, F)
    assert torch.allclose(a, b, atol=1e-6)
    assert torch.equal(probe(F), probe(F))


def test_probe_k_mismatch():
    m = DarknessAdaptiveRecognizer(small_config())
    m.probe.K = 2
    with pytest.raises(ConfigError):
        m.darkness_probe(torch.randn(1, 6, 8))


# -- functional ops ---------------------------------------------------------


def test_adaptive_encode_cases(rng):
    F = torch.tensor(rng.normal(size=(1, 2, 3)))
    E = torch.tensor(rng.normal(size=(2, 3, 4)))
    beta = torch.tensor([[0.3, 0.7]], dtype=torch.float64)
    ref = 0.3 * (F[0].numpy() @ E[0].numpy()) + 0.7 * (F[0].numpy() @ E[1].numpy())
    np.testing.assert_allclose(adaptive_encode(F, beta, E)[0].numpy(), ref, rtol=1e-12)
    onehot = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert torch.allclose(adaptive_encode(F, onehot, E)[0], F[0] @ E[1], rtol=1e-14)
    same = E[:1].repeat(2, 1, 1)
    assert torch.allclose(adaptive_encode(F, beta, same), adaptive_encode(F, onehot, same), rtol=1e-12)
    with pytest.raises(ShapeError):
        adaptive_encode(F, beta, E[:, :2])


def test_generate_prompt_cases(rng):
    P = torch.tensor(rng.normal(size=(2, 3, 4)))
    mid = generate_prompt(torch.tensor([[0.5, 0.5]], dtype=torch.float64), P)[0]
    assert torch.allclose(mid, (P[0] + P[1]) / 2, rtol=1e-14)
    assert torch.equal(generate_prompt(torch.tensor([[1.0, 0.0]], dtype=torch.float64), P)[0], P[0])
    K = 4
    P = torch.tensor(rng.normal(size=(K, 3, 4)))
    beta = rng.dirichlet(np.ones(K))
    ref = np.zeros((3, 4))
    for k in range(K):
        for i in range(3):
            for j in range(4):
                ref[i, j] += beta[k] * P[k, i, j].item()
    np.testing.assert_allclose(generate_prompt(torch.tensor(beta)[None], P)[0].numpy(), ref, rtol=1e-12)


def test_classify_cases(rng):
    K, d, n = 3, 5, 4
    tokens = torch.tensor(rng.normal(size=(2, 7, d)))
    W = torch.tensor(rng.normal(size=(K, d, n)))
    b = torch.tensor(rng.normal(size=(K, n)))
    beta = torch.tensor(rng.dirichlet(np.ones(K), size=2))
    out = classify(tokens, beta, W, b, 3)
    for i in range(2):
        ref = sum(beta[i, k].item() * (tokens[i, 3].numpy() @ W[k].numpy() + b[k].numpy()) for k in range(K))
        np.testing.assert_allclose(out[i].numpy(), ref, rtol=1e-12)
    onehot = torch.zeros(2, K, dtype=torch.float64)
    onehot[:, 2] = 1
    assert torch.equal(classify(tokens, onehot, W, b, 3), branch_logits(tokens[:, 3], W, b)[:, 2])
    same_W, same_b = W[:1].repeat(K, 1, 1), b[:1].repeat(K, 1)
    y1 = branch_logits(tokens[:, 3], same_W, same_b)[:, 0]
    assert torch.allclose(classify(tokens, beta, same_W, same_b, 3), y1, rtol=1e-12)


# -- fusion -------------------------------------------------------------------


def test_fusion_length_90():
    f = FusionTransformer(90, 16, layers=1, heads=2)
    out = f(torch.randn(1, 64, 16), torch.randn(1, 16, 16), torch.randn(1, 10, 16))
    assert out.shape == (1, 90, 16)


def test_fusion_shape_errors():
    f = FusionTransformer(90, 16, layers=1, heads=2)
    with pytest.raises(ShapeError):
        f(torch.randn(1, 64, 16), torch.randn(1, 16, 8), torch.randn(1, 10, 16))
    with pytest.raises(ShapeError):
        f(torch.randn(1, 63, 16), torch.randn(1, 16, 16), torch.randn(1, 10, 16))


def test_fusion_matches_oracle_and_audio_permutation():
    torch.manual_seed(2)
    f = FusionTransformer(12, 8, layers=2, heads=2).eval()
    V, A, O = torch.randn(2, 6, 8), torch.randn(2, 4, 8), torch.randn(2, 2, 8)
    with torch.no_grad():
        assert torch.allclose(f(V, A, O), fusion_oracle(f, V, A, O), atol=1e-6)
        permuted = f(V, A[:, [2, 0, 3, 1]], O)
    assert permuted.shape == (2, 12, 8)


# -- full model ---------------------------------------------------------------


def test_routing_boundary():
    m = DarknessAdaptiveRecognizer(small_config()).eval()
    F, A = inputs(m.config, B=3)
    out = m(F, A, torch.tensor([50.0, 40.0, 39.9]), t=40)
    assert out.path == ["day", "dark", "dark"]
    assert torch.equal(out.beta[0], torch.tensor([1.0, 0.0, 0.0]))
    assert out.q_hat.shape == (3, 64)
    assert torch.allclose(out.beta.sum(-1), torch.ones(3))


def test_force_dark_overrides_routing():
    m = DarknessAdaptiveRecognizer(small_config()).eval()
    F, A = inputs(m.config, B=2)
    routed = m(F, A, torch.tensor([10.0, 10.0]))
    forced = m(F, A, torch.tensor([90.0, 90.0]), force_dark=True)
    assert forced.path == ["dark", "dark"]
    assert torch.equal(routed.logits, forced.logits)


def test_k1_tied_matches_day_path():
    torch.manual_seed(0)
    m = DarknessAdaptiveRecognizer(small_config(K=1, tie_day_branch=True)).eval()
    F, A = inputs(m.config, B=2)
    with torch.no_grad():
        dark = m(F, A, torch.tensor([10.0, 10.0])).logits
        day = m(F, A, torch.tensor([90.0, 90.0])).logits
    assert torch.equal(dark, day)


def test_day_branch_untied_by_default():
    m = DarknessAdaptiveRecognizer(small_config())
    names = {k for k, _ in m.named_parameters()}
    assert {"E_v_day", "prompt_day", "cls_W_day", "cls_b_day"} <= names
    assert m.E_v.shape == (3, 8, 8) and m.prompts.shape == (3, 4, 8) and m.cls_W.shape == (3, 8, 5)


def test_branch_init_spread():
    torch.manual_seed(0)
    same = DarknessAdaptiveRecognizer(small_config(d_v=64, d_in=64, branch_init_spread=0.0))
    assert all(torch.equal(same.E_v[0], same.E_v[k]) for k in range(3))
    torch.manual_seed(0)
    m = DarknessAdaptiveRecognizer(small_config(d_v=64, d_in=64, branch_init_spread=0.1))
    E = m.E_v.detach()
    assert E.std().item() == pytest.approx(64 ** -0.5, rel=0.05)
    # branch differences are spread * sqrt(2) / sqrt(1 + spread^2) of the per-branch scale
    diff = (E[1] - E[0]).std().item() / E[0].std().item()
    assert diff == pytest.approx(0.1 * math.sqrt(2) / math.sqrt(1.01), rel=0.05)
    with pytest.raises(ConfigError):
        small_config(branch_init_spread=-1.0).validate()


def test_prompt_len_validation():
    with pytest.raises(ConfigError):
        small_config(prompt_len=1).validate()
    with pytest.raises(ConfigError):
        small_config(K=0).validate()


def test_ladder_structure():
    names = [n for n, _ in ladder_configs(small_config())]
    assert names[0] == "vanilla" and len(names) == 4
    cfgs = [c for _, c in ladder_configs(small_config())]
    assert cfgs[0].K == 1 and cfgs[0].tie_day_branch
    assert [c.adaptive_prompts for c in cfgs] == [False, False, True, True]
    assert [c.adaptive_classifier for c in cfgs] == [False, False, False, True]


def test_fixed_F_beta_unaffected_by_audio():
    torch.manual_seed(0)
    m = DarknessAdaptiveRecognizer(small_config())
    torch.nn.init.normal_(m.probe.head.weight)
    F, A = inputs(m.config, B=2)
    b1 = m(F, A, torch.tensor([5.0, 5.0])).beta
    b2 = m(F, torch.randn_like(A), torch.tensor([5.0, 5.0])).beta
    assert torch.equal(b1, b2)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_convex_hull_property(seed):
    torch.manual_seed(seed % 1000)
    m = DarknessAdaptiveRecognizer(small_config(K=4)).eval()
    torch.nn.init.normal_(m.probe.head.weight, std=3.0)
    for k in range(4):
        torch.nn.init.normal_(m.cls_W[k])
        torch.nn.init.normal_(m.cls_b[k])
    F, A = inputs(m.config, B=5, seed=seed)
    with torch.no_grad():
        y = m(F, A, torch.full((5,), 10.0)).logits
        yk, _ = m.branch_outputs(F, A)
    assert torch.all(y >= yk.min(1).values - 1e-5) and torch.all(y <= yk.max(1).values + 1e-5)


def test_identical_branches_ignore_beta():
    torch.manual_seed(0)
    m = DarknessAdaptiveRecognizer(small_config(K=3)).eval()
    with torch.no_grad():
        for p in (m.E_v, m.prompts, m.cls_W, m.cls_b):
            p.copy_(p[:1].expand_as(p))
        F, A = inputs(m.config, B=3)
        y1 = m(F, A, torch.full((3,), 5.0)).logits
        torch.nn.init.normal_(m.probe.head.weight, std=5.0)
        y2 = m(F, A, torch.full((3,), 5.0)).logits
    assert torch.allclose(y1, y2, atol=1e-6)
    assert torch.equal(y1.argmax(-1), y2.argmax(-1))


# -- gradients ---------------------------------------------------------------


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    cfg = small_config(K=2, d_in=8, d_v=8, heads=2, probe_heads=2)
    m = DarknessAdaptiveRecognizer(cfg).double()
    torch.nn.init.normal_(m.probe.head.weight, std=0.5)
    F, A = inputs(cfg, B=2, dtype=torch.float64)
    Y = torch.tensor([5.0, 20.0])
    target = torch.tensor([1, 3])

    def loss():
        out = m(F, A, Y)
        return torch.nn.functional.cross_entropy(out.logits, target) + out.q_hat.pow(2).mean()

    m.zero_grad()
    loss().backward()
    checks = [(m.probe.head.weight, [0, 5, 11]), (m.probe.head.bias, [0, 1]), (m.prompts, [0, 17, 40]),
              (m.E_v, [1, 33, 100])]
    eps = 1e-6
    for p, idxs in checks:
        for i in idxs:
            analytic = p.grad.view(-1)[i].item()
            with torch.no_grad():
                orig = p.view(-1)[i].item()
                p.view(-1)[i] = orig + eps
                up = loss().item()
                p.view(-1)[i] = orig - eps
                down = loss().item()
                p.view(-1)[i] = orig
            assert _rel_err(analytic, (up - down) / (2 * eps)) <= 1e-4
