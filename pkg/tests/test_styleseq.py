"""Style encoder: patch features, Fourier positions, latent-query adapter."""
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from storyloom.checkpoint import load_checkpoint, load_manifest, save_checkpoint
from storyloom.errors import ShapeError
from storyloom.styleseq import (
    PatchEncoder, StyleQueryAdapter, augment_features, encode_image_features,
    fourier_position_embed, sq_forward,
)


# -- independent oracles --------------------------------------------------------------------

def patch_oracle(image, weight, bias, grid, pool):
    """Block means, flattened per patch in (row, col, channel) order, then an affine map."""
    h = image.shape[0]
    cells = grid * pool
    step = h // cells
    pooled = np.zeros((cells, cells, 3))
    for r in range(cells):
        for c in range(cells):
            pooled[r, c] = image[r * step:(r + 1) * step, c * step:(c + 1) * step].mean(axis=(0, 1))
    tokens = []
    for gr in range(grid):
        for gc in range(grid):
            flat = []
            for pr in range(pool):
                for pc in range(pool):
                    flat.extend(pooled[gr * pool + pr, gc * pool + pc])
            tokens.append([sum(flat[i] * weight[i][o] for i in range(len(flat))) + bias[o] for o in range(len(bias))])
    return np.array(tokens)


def _matvec(W, x):
    return [sum(w * v for w, v in zip(row, x)) for row in W]


def _add(a, b):
    return [x + y for x, y in zip(a, b)]


def _attention_oracle(xs, ctx, p):
    qs = [_matvec(p["q"], x) for x in xs]
    ks = [_matvec(p["k"], c) for c in ctx]
    vs = [_matvec(p["v"], c) for c in ctx]
    d = len(qs[0])
    out = []
    for q in qs:
        scores = [sum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in ks]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        mixed = [sum(wi / z * v[j] for wi, v in zip(w, vs)) for j in range(d)]
        out.append(_add(_matvec(p["o"], mixed), p["ob"]))
    return out


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _ffn_oracle(x, p):
    h = [_gelu(v) for v in _add(_matvec(p["w1"], x), p["b1"])]
    return _add(_matvec(p["w2"], h), p["b2"])


def _lists(module):
    return module.weight.detach().tolist()


def _attn_params(a):
    return {"q": _lists(a.to_q), "k": _lists(a.to_k), "v": _lists(a.to_v), "o": _lists(a.to_out),
            "ob": a.to_out.bias.detach().tolist()}


def _ffn_params(f):
    return {"w1": _lists(f[0]), "b1": f[0].bias.detach().tolist(), "w2": _lists(f[2]), "b2": f[2].bias.detach().tolist()}


def block_update_oracle(adapter, tokens):
    """Scalar re-evaluation of s <- FFN(s + CA(s, tau)) + s ; s <- FFN(s + SA(s)) + s."""
    s = adapter.latents.detach().tolist()
    for blk in adapter.blocks:
        ca = _attention_oracle(s, tokens, _attn_params(blk.cross_attn))
        s = [_add(_ffn_oracle(_add(si, ci), _ffn_params(blk.cross_ff)), si) for si, ci in zip(s, ca)]
        sa = _attention_oracle(s, s, _attn_params(blk.self_attn))
        s = [_add(_ffn_oracle(_add(si, ai), _ffn_params(blk.self_ff)), si) for si, ai in zip(s, sa)]
    return np.array(s)


def _randomize(module, seed, scale=0.5):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


# -- patch encoder ---------------------------------------------------------------------------

def test_feature_shape_contract():
    images = np.random.default_rng(0).random((3, 8, 8, 3))
    feats = encode_image_features(images, PatchEncoder(num_tokens=4, dim=16, pool=2))
    assert tuple(feats.shape) == (3, 4, 16)


def test_duplicated_images_give_identical_blocks():
    img = np.random.default_rng(1).random((8, 8, 3))
    feats = encode_image_features([img, img, img], PatchEncoder(4, 16, pool=2))
    assert torch.equal(feats[0], feats[1]) and torch.equal(feats[1], feats[2])


def test_encoder_matches_hand_rolled_arithmetic():
    enc = PatchEncoder(num_tokens=4, dim=5, pool=2, seed=11)
    img = np.random.default_rng(2).random((8, 8, 3))
    got = encode_image_features(img[None], enc)[0].double().numpy()
    want = patch_oracle(img, enc.weight.double().tolist(), enc.bias.double().tolist(), grid=2, pool=2)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_ragged_images_rejected():
    with pytest.raises(ShapeError):
        encode_image_features([np.zeros((8, 8, 3)), np.zeros((16, 16, 3))])


def test_encoder_requires_square_token_count():
    with pytest.raises(ShapeError):
        PatchEncoder(num_tokens=3)


# -- position embedding ------------------------------------------------------------------------

def test_single_image_position_is_sin0_cos1():
    pe = fourier_position_embed(1, num_bands=4)[0, 0]
    assert torch.all(pe[0::2] == 0) and torch.all(pe[1::2] == 1)


def test_two_images_one_band():
    pe = fourier_position_embed(2, num_bands=1, dtype=torch.float64)[:, 0]
    np.testing.assert_allclose(pe.numpy(), [[0.0, 1.0], [0.0, -1.0]], atol=1e-15)


def test_three_images_two_bands_direct_formula():
    pe = fourier_position_embed(3, num_bands=2, dtype=torch.float64)[:, 0].numpy()
    want = []
    for u in (0.0, 0.5, 1.0):
        row = []
        for b in range(2):
            row += [math.sin(2 ** b * math.pi * u), math.cos(2 ** b * math.pi * u)]
        want.append(row)
    np.testing.assert_allclose(pe, want, atol=1e-15)


@given(k=st.integers(1, 12), bands=st.integers(1, 8), tokens=st.integers(1, 5))
def test_position_embedding_bounded_and_shared_across_tokens(k, bands, tokens):
    pe = fourier_position_embed(k, bands, tokens)
    assert pe.shape == (k, tokens, 2 * bands)
    assert pe.abs().max() <= 1.0
    assert torch.equal(pe, pe[:, :1].expand_as(pe))


@given(k=st.integers(1, 6))
def test_augmentation_keeps_source_features(k):
    feats = torch.randn(k, 4, 8)
    aug = augment_features(feats, fourier_position_embed(k, 3, 4))
    assert aug.shape == (k, 4, 14)
    assert torch.equal(aug[..., :8], feats)


def test_augmentation_shape_mismatch():
    with pytest.raises(ShapeError):
        augment_features(torch.randn(2, 4, 8), fourier_position_embed(3, 3, 4))


# -- adapter -------------------------------------------------------------------------------------

def test_paper_scale_output_shape():
    adapter = StyleQueryAdapter(dim=768, num_latents=4, depth=1, heads=8, seed=0)
    for k in (1, 5):
        out = adapter.encode(torch.randn(k, 32, 768))
        assert tuple(out.shape) == (4, 768)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_toy_output_shape_independent_of_k(k):
    adapter = StyleQueryAdapter(dim=64, num_latents=4, depth=4, heads=4)
    out = adapter.encode(torch.randn(k, 4, 64))
    assert tuple(out.shape) == (4, 64) and torch.isfinite(out).all()


def test_depth_zero_returns_initial_query():
    adapter = StyleQueryAdapter(dim=8, num_latents=3, depth=0, heads=2)
    out = adapter.encode(torch.randn(2, 4, 8))
    assert torch.equal(out, adapter.latents.detach())


def test_initial_query_is_a_fixed_trainable_parameter():
    adapter = StyleQueryAdapter(dim=8, num_latents=3, depth=1, heads=2, seed=4)
    assert adapter.latents.requires_grad
    before = adapter.latents.detach().clone()
    adapter.encode(torch.randn(2, 4, 8))
    assert torch.equal(before, adapter.latents.detach())
    assert torch.equal(before, StyleQueryAdapter(dim=8, num_latents=3, depth=1, heads=2, seed=4).latents.detach())


def test_scalar_oracle_smallest_case():
    """L_s=1, C=2, L_v=1, k=1, one head, depth 1, hand-set weights."""
    adapter = StyleQueryAdapter(dim=2, num_latents=1, depth=1, heads=1, num_bands=1, ff_mult=4).double()
    _randomize(adapter, 3)
    feats = torch.tensor([[[0.3, -0.7]]], dtype=torch.float64)
    aug = augment_features(feats, fourier_position_embed(1, 1, 1, torch.float64))
    got = sq_forward(adapter, aug).detach().numpy()
    want = block_update_oracle(adapter, aug.reshape(-1, 4).tolist())
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_scalar_oracle_with_real_softmax():
    adapter = StyleQueryAdapter(dim=4, num_latents=2, depth=2, heads=1, num_bands=1, ff_mult=2).double()
    _randomize(adapter, 8)
    feats = torch.randn(3, 2, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    aug = augment_features(feats, fourier_position_embed(3, 1, 2, torch.float64))
    got = sq_forward(adapter, aug).detach().numpy()
    want = block_update_oracle(adapter, aug.reshape(-1, 6).tolist())
    np.testing.assert_allclose(got, want, rtol=1e-11, atol=1e-11)


@given(k=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_duplication_invariance(k, seed):
    adapter = StyleQueryAdapter(dim=8, num_latents=3, depth=2, heads=2, num_bands=2, seed=seed % 7).double()
    one = torch.randn(1, 4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    zeros = torch.zeros(1, 4, 4, dtype=torch.float64)
    single = sq_forward(adapter, augment_features(one, zeros))
    many = sq_forward(adapter, augment_features(one.expand(k, 4, 8), zeros.expand(k, 4, 4)))
    rel = (many - single).norm() / single.norm()
    assert rel <= 1e-6


def _central_fd_check(adapter, inputs, eps=1e-6):
    weights = torch.randn(adapter.num_latents, adapter.dim, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(99))

    def loss():
        return (sq_forward(adapter, inputs) * weights).sum()

    adapter.zero_grad()
    loss().backward()
    worst = 0.0
    for name, p in adapter.named_parameters():
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
            numeric.view(-1)[i] = (up - down) / (2 * eps)
        rel = ((p.grad - numeric).norm() / max(numeric.norm().item(), 1e-12)).item()
        worst = max(worst, rel)
    return worst


def test_gradients_match_central_differences():
    adapter = StyleQueryAdapter(dim=4, num_latents=2, depth=2, heads=2, num_bands=1, ff_mult=2, seed=1).double()
    feats = torch.randn(2, 2, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    aug = augment_features(feats, fourier_position_embed(2, 1, 2, torch.float64))
    assert _central_fd_check(adapter, aug) <= 1e-4


def test_forward_is_deterministic():
    adapter = StyleQueryAdapter(dim=16, num_latents=4, depth=2, heads=4, seed=2)
    x = torch.randn(3, 4, 16)
    assert torch.equal(adapter.encode(x), adapter.encode(x))


def test_wrong_feature_dim_rejected():
    adapter = StyleQueryAdapter(dim=16, num_latents=4, depth=1, heads=4)
    with pytest.raises(ShapeError):
        adapter(torch.randn(2, 4, 16))


def test_non_finite_features_rejected():
    adapter = StyleQueryAdapter(dim=8, num_latents=2, depth=1, heads=2)
    x = torch.randn(2, 4, 8)
    x[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        adapter.encode(x)


def test_dim_must_divide_heads():
    with pytest.raises(ShapeError):
        StyleQueryAdapter(dim=10, heads=4)


def test_padded_tokens_masked_out():
    adapter = StyleQueryAdapter(dim=8, num_latents=2, depth=2, heads=2, num_bands=1).double()
    x = torch.randn(2, 4, 10, dtype=torch.float64)
    padded = torch.cat([x, 123.0 * torch.ones(1, 4, 10, dtype=torch.float64)])
    mask = torch.tensor([True] * 8 + [False] * 4)
    np.testing.assert_allclose(adapter(padded, mask).detach(), adapter(x).detach(), atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    a = StyleQueryAdapter(dim=8, num_latents=2, depth=1, heads=2, seed=1)
    b = StyleQueryAdapter(dim=8, num_latents=2, depth=1, heads=2, seed=2)
    save_checkpoint(a, tmp_path / "sq", seed=1)
    manifest = load_manifest(tmp_path / "sq")
    assert manifest["seed"] == 1 and manifest["dtype"] == "float32"
    assert (tmp_path / "sq.bin").stat().st_size == 4 * manifest["total"]
    load_checkpoint(b, tmp_path / "sq")
    x = torch.randn(3, 4, 8)
    assert torch.equal(a.encode(x), b.encode(x))
