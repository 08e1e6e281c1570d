import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffma.diffusion import PoolingCodec
from diffma.embedder import (
    TAU_INIT,
    VisionEmbedder,
    contrastive_loss,
    embed_latent,
    infonce_loss,
    load_embedder,
    pretrain_embedder,
    save_embedder,
    similarity_matrix,
)
from diffma.errors import FingerprintError
from diffma.synthetic import synthesize

from fd import RTOL, central_fd, relative_error


def small(dim=32, hw=(8, 8), patch=2, seed=0):
    torch.manual_seed(seed)
    return VisionEmbedder(4, patch, dim, hw)


def test_token_count_reference_grid():
    e = VisionEmbedder(4, 2, 64, (28, 28))
    out = embed_latent(e, torch.randn(2, 4, 28, 28))
    assert out.tokens.shape == (2, 196, 64)
    assert out.mask.shape == (2, 196)


@pytest.mark.parametrize("patch", [7, 4, 2])
def test_reference_patch_sizes(patch):
    e = VisionEmbedder(4, patch, 16, (28, 28))
    assert e.num_tokens == (28 // patch) ** 2


def test_indivisible_latent_rejected():
    with pytest.raises(ValueError):
        VisionEmbedder(4, 3, 16, (28, 28))
    e = small()
    with pytest.raises(ValueError, match="divisible"):
        e(torch.randn(1, 4, 9, 9))


def test_constant_input_gives_equal_mask():
    out = small()(torch.full((1, 4, 8, 8), 0.3))
    assert torch.allclose(out.mask, out.mask[0, 0].expand_as(out.mask), atol=0, rtol=0)


def test_identical_items_identical_outputs():
    z = torch.randn(1, 4, 8, 8)
    out = small()(torch.cat([z, z]))
    assert torch.equal(out.tokens[0], out.tokens[1])
    assert torch.equal(out.mask[0], out.mask[1])


def test_no_positional_information():
    # moving content to another patch moves its token unchanged
    e = small()
    z = torch.zeros(1, 4, 8, 8)
    z[..., 0:2, 0:2] = torch.randn(4, 2, 2)
    moved = torch.roll(z, shifts=(4, 2), dims=(-2, -1))
    a, b = e(z), e(moved)
    assert torch.allclose(a.tokens[0, 0], b.tokens[0, 2 * 4 + 1], atol=1e-6)
    assert torch.allclose(a.mask[0, 0], b.mask[0, 9], atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 1000))
def test_mask_bounded(scale, seed):
    z = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(seed)) * scale
    # layer norm bounds the tokens, so the sigmoid never saturates
    m = small()(z).mask
    assert ((m > 0) & (m < 1)).all()


def test_tau_init_and_clamp():
    e = small()
    assert e.tau.item() == pytest.approx(TAU_INIT)
    with torch.no_grad():
        e.log_tau.fill_(100.0)
    assert e.tau.item() == 10.0
    with torch.no_grad():
        e.log_tau.fill_(-100.0)
    assert e.tau.item() == pytest.approx(1e-3)


# --- similarity ------------------------------------------------------------


def test_similarity_unit_diagonal():
    t = torch.randn(5, 6, 3, dtype=torch.float64)
    tau = 0.07
    S = similarity_matrix(t, tau)
    assert torch.allclose(tau * torch.diagonal(S), torch.ones(5, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(S, S.T)
    assert (tau * S).abs().max() <= 1 + 1e-12


def test_similarity_orthogonal_and_proportional():
    a = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert similarity_matrix(a, 1.0)[0, 1] == 0
    x = torch.randn(1, 4, 3, dtype=torch.float64)
    S = similarity_matrix(torch.cat([x, 2 * x]), 0.5)
    assert S[0, 1].item() == pytest.approx(1 / 0.5, abs=1e-12)


def test_similarity_rejects_zero_norm_and_bad_tau():
    t = torch.randn(3, 2, 2)
    t[1] = 0
    with pytest.raises(ValueError, match="zero-norm"):
        similarity_matrix(t, 1.0)
    with pytest.raises(ValueError):
        similarity_matrix(torch.randn(2, 2, 2), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=3, max_size=3), st.integers(0, 1000))
def test_similarity_scale_invariant(scales, seed):
    t = torch.randn(3, 4, 5, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    scaled = t * torch.tensor(scales, dtype=torch.float64).view(3, 1, 1)
    assert torch.allclose(similarity_matrix(t, 0.1), similarity_matrix(scaled, 0.1), atol=1e-9)


# --- InfoNCE ---------------------------------------------------------------


def test_infonce_single():
    assert infonce_loss(torch.tensor([[3.0]])).item() == 0


@pytest.mark.parametrize("B", [2, 5, 16])
def test_infonce_constant(B):
    S = torch.full((B, B), 2.5, dtype=torch.float64)
    assert infonce_loss(S).item() == pytest.approx(math.log(B), abs=1e-12)


def test_infonce_orthogonal_pair():
    loss = infonce_loss(torch.eye(2, dtype=torch.float64)).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_infonce_rejects_non_square():
    with pytest.raises(ValueError):
        infonce_loss(torch.zeros(2, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000), st.floats(0.01, 50))
def test_infonce_non_negative(B, seed, scale):
    S = torch.randn(B, B, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    assert infonce_loss(S).item() >= 0


def test_infonce_gradient_wrt_tokens():
    g = torch.Generator().manual_seed(0)
    tokens = torch.randn(4, 3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    f = lambda: infonce_loss(similarity_matrix(tokens, 0.5))
    f().backward()
    assert relative_error(tokens.grad, central_fd(f, tokens)) < RTOL


# --- pretraining -----------------------------------------------------------


@pytest.fixture(scope="module")
def source_latents():
    src, _ = synthesize(64, 11, 64)
    return PoolingCodec(image_channels=1).encode(torch.from_numpy(src))


def test_init_loss_close_to_log_batch(source_latents):
    # averaged over random initializations and random batches of synthetic sources
    B, vals = 16, []
    for seed in range(8):
        torch.manual_seed(seed)
        e = VisionEmbedder(4, 2, 64, (8, 8))
        idx = torch.randperm(len(source_latents))[:B]
        with torch.no_grad():
            vals.append(contrastive_loss(e, source_latents[idx]).item())
    mean = float(np.mean(vals))
    assert abs(mean - math.log(B)) <= 0.2 * math.log(B), f"init loss {mean:.3f} vs log B {math.log(B):.3f}"


def test_pretraining_lowers_loss_and_freezes(source_latents):
    torch.manual_seed(0)
    e = VisionEmbedder(4, 2, 64, (8, 8))
    losses = pretrain_embedder(e, source_latents, steps=60, batch_size=16, lr=1e-3, seed=0)
    assert np.mean(losses[-10:]) < math.log(16)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert not any(p.requires_grad for p in e.parameters())
    assert not e.training


def test_small_batch_warns(source_latents):
    e = VisionEmbedder(4, 2, 16, (8, 8))
    with pytest.warns(UserWarning, match="batch size"):
        losses = pretrain_embedder(e, source_latents, steps=2, batch_size=1)
    assert losses == [0.0, 0.0]


def test_checkpoint_roundtrip_bitwise(tmp_path, source_latents):
    e = VisionEmbedder(4, 2, 32, (8, 8))
    pretrain_embedder(e, source_latents, steps=3, batch_size=8)
    save_embedder(e, tmp_path / "emb.pt")
    back = load_embedder(tmp_path / "emb.pt", expect_patch_size=2, expect_grid=(4, 4), expect_dim=32)
    a, b = e(source_latents[:4]), back(source_latents[:4])
    assert torch.equal(a.tokens, b.tokens) and torch.equal(a.mask, b.mask)
    assert back.fingerprint() == e.fingerprint()


@pytest.mark.parametrize("kw", [{"expect_patch_size": 4}, {"expect_grid": (8, 8)}, {"expect_dim": 64}])
def test_checkpoint_fingerprint_mismatch(tmp_path, kw):
    save_embedder(VisionEmbedder(4, 2, 32, (8, 8)), tmp_path / "emb.pt")
    with pytest.raises(FingerprintError):
        load_embedder(tmp_path / "emb.pt", **kw)
