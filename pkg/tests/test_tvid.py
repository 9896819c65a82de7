import math

import numpy as np
import pytest
from scipy.special import erf

from stgr import autograd as ag
from stgr.autograd import Tensor, grad_check
from stgr.errors import ArgumentError, ConfigError, ShapeError
from stgr.losses import info_nce_loss
from stgr.tvid import (AttributeVector, GuidanceSet, TextEncoderStub, encode_attributes, init_projection,
                       project, project_guidance)


def np_gelu(x):
    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def np_layernorm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def reference_encode(enc, seqs, weight_delta=None):
    """Plain numpy forward of the stub with an explicit dense weight per projection."""
    P = {k: t.data for k, t in enc.base.items()}
    out = []
    for seq in seqs:
        x = P["text.embed"][np.asarray(seq)]
        n, d = x.shape
        dh = d // enc.heads
        for b in range(enc.blocks):
            p = f"text.block{b}"

            def proj(v, name):
                w = P[f"{p}.attn.{name}.weight"]
                if weight_delta is not None:
                    w = w + weight_delta(f"{p}.attn.{name}")
                return v @ w + P[f"{p}.attn.{name}.bias"]

            h = np_layernorm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
            q, k, v = proj(h, "q"), proj(h, "k"), proj(h, "v")
            att = np.zeros((n, d))
            for hd in range(enc.heads):
                sl = slice(hd * dh, (hd + 1) * dh)
                logits = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
                w = np.exp(logits - logits.max(axis=1, keepdims=True))
                w /= w.sum(axis=1, keepdims=True)
                att[:, sl] = w @ v[:, sl]
            x = x + proj(att, "o")
            h2 = np_layernorm(x, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
            mid = np_gelu(h2 @ P[f"{p}.mlp.fc1.weight"] + P[f"{p}.mlp.fc1.bias"])
            x = x + mid @ P[f"{p}.mlp.fc2.weight"] + P[f"{p}.mlp.fc2.bias"]
        out.append(x.mean(axis=0))
    return np.stack(out)


SEQS = [[1, 5, 9], [3], [7, 7, 2, 0]]


def test_zero_init_adapters_reproduce_base():
    enc = TextEncoderStub(d_t=16, heads=4, vocab_size=12, rank=4, seed=3)
    got = np.stack([a.values for a in encode_attributes(SEQS, enc)])
    np.testing.assert_allclose(got, reference_encode(enc, SEQS), rtol=0, atol=1e-12)
    for site, ad in enc.adapters.items():
        assert np.array_equal(ad.delta(), np.zeros((16, 16)))


def test_full_rank_adapter_doubles_weight():
    enc = TextEncoderStub(d_t=8, heads=2, vocab_size=12, rank=8, alpha=4.0, seed=5)
    for site, ad in enc.adapters.items():
        ad.down.data[...] = np.eye(8)
        ad.up.data[...] = enc.base[f"{site}.weight"].data / ad.scaling
    got = np.stack([a.values for a in encode_attributes(SEQS, enc)])
    expected = reference_encode(enc, SEQS, weight_delta=lambda site: enc.base[f"{site}.weight"].data)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_encoding_is_deterministic_and_validated():
    enc = TextEncoderStub(d_t=8, heads=2, vocab_size=12, rank=2, seed=0)
    a = [v.values for v in encode_attributes(SEQS, enc)]
    b = [v.values for v in encode_attributes(SEQS, enc)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert [v.attribute_id for v in encode_attributes(SEQS, enc)] == [0, 1, 2]
    with pytest.raises(ArgumentError):
        encode_attributes([], enc)
    with pytest.raises(ArgumentError):
        encode_attributes([[12]], enc)


def test_soft_token_inputs(rng):
    enc = TextEncoderStub(d_t=8, heads=2, vocab_size=12, rank=2, seed=0)
    attrs = rng.standard_normal((3, 8))
    out = enc.forward(attrs).data
    assert out.shape == (3, 8)
    # attributes are encoded independently of each other
    np.testing.assert_allclose(enc.forward(attrs[1:2]).data[0], out[1], rtol=0, atol=1e-13)
    with pytest.raises(ShapeError):
        enc.forward(rng.standard_normal((2, 5)))


def test_dropout_only_in_training(rng):
    enc = TextEncoderStub(d_t=8, heads=2, vocab_size=12, rank=2, dropout_rate=0.5, seed=0)
    for ad in enc.adapters.values():
        ad.up.data[...] = rng.standard_normal(ad.up.shape)
    attrs = rng.standard_normal((2, 8))
    eval_out = enc.forward(attrs).data
    assert np.array_equal(eval_out, enc.forward(attrs, training=False, key=(0, 1, 2)).data)
    t1 = enc.forward(attrs, training=True, key=(0, 1, 2)).data
    assert np.array_equal(t1, enc.forward(attrs, training=True, key=(0, 1, 2)).data)
    assert not np.array_equal(t1, eval_out)


# -- projection -----------------------------------------------------------------

def test_projection_matches_matrix_oracle(rng):
    p = init_projection(6, 4, seed=2)
    for t in p.values():
        t.data[...] = rng.standard_normal(t.shape)
    attrs = [AttributeVector(rng.standard_normal(6), i) for i in range(3)]
    g = project_guidance(attrs, p, d_v=4)
    assert isinstance(g, GuidanceSet) and g.vectors.shape == (3, 4) and g.k == 3
    x = np.stack([a.values for a in attrs])
    hidden = np_gelu(x @ p["proj.fc1.weight"].data + p["proj.fc1.bias"].data)
    expected = hidden @ p["proj.fc2.weight"].data + p["proj.fc2.bias"].data
    np.testing.assert_allclose(g.vectors, expected, rtol=0, atol=1e-12)
    perm = [2, 0, 1]
    np.testing.assert_array_equal(project_guidance([attrs[i] for i in perm], p).vectors, g.vectors[perm])


def test_projection_zero_weights_and_dim_checks(rng):
    p = init_projection(6, 4, seed=0)
    for t in p.values():
        t.data[...] = 0.0
    attrs = [AttributeVector(rng.standard_normal(6), 0)]
    assert np.array_equal(project_guidance(attrs, p).vectors, np.zeros((1, 4)))
    with pytest.raises(ConfigError):
        project_guidance(attrs, p, d_v=5)
    with pytest.raises(ConfigError):
        project_guidance([AttributeVector(np.zeros(3), 0)], p)
    with pytest.raises(ArgumentError):
        project_guidance([], p)


def test_contrastive_gradients_reach_adapters_and_projection(rng):
    enc = TextEncoderStub(d_t=8, heads=2, blocks=1, vocab_size=12, rank=2, dropout_rate=0.0, seed=1)
    for ad in enc.adapters.values():
        ad.up.data[...] = rng.standard_normal(ad.up.shape) * 0.3
    proj = init_projection(8, 6, hidden=6, seed=1)
    attrs = rng.standard_normal((2, 8))
    pos, neg = rng.standard_normal(6), rng.standard_normal((3, 6))
    params = {**enc.lora_params(), **proj}

    def f():
        return info_nce_loss(project(enc.forward(attrs), proj), pos, neg, 0.5)

    report = grad_check(f, params)
    assert max(r["max_rel_err"] for r in report.values()) < 1e-4
