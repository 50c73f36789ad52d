import numpy as np
import pytest
import torch

from latcast.denoiser import (
    Denoiser,
    DenoiserConfig,
    DualStreamBlock,
    canonical_config_large,
    canonical_config_small,
    frame_token_coords,
    latent_token_coords,
    parameter_count,
    patchify,
)
from latcast.errors import ValidationError
from latcast.synthetic import toy_grid


def tiny_config(latent_channels=5, **kwargs):
    defaults = dict(
        latent_channels=latent_channels,
        model_dim=32,
        ffn_dim=64,
        n_heads=2,
        head_dim=16,
        preprocess_layers=1,
        dual_stream_layers=1,
        single_stream_layers=1,
        rope_axes=(4, 6, 6),
        noise_embed_dim=16,
        year_embed_dim=8,
    )
    defaults.update(kwargs)
    return DenoiserConfig(**defaults)


def _randomize(model, scale=0.02, seed=0):
    # break the zero-init gates so every parameter participates
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


class TestConfig:
    def test_heads_times_dim_must_match(self):
        with pytest.raises(ValidationError):
            tiny_config(model_dim=48)

    def test_rope_split_must_sum_to_head_dim(self):
        with pytest.raises(ValidationError):
            tiny_config(rope_axes=(4, 6, 4))

    def test_patch_size_fixed(self):
        with pytest.raises(ValidationError):
            tiny_config(patch_size=(2, 2))

    def test_dict_round_trip(self):
        cfg = tiny_config()
        assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg

    def test_canonical_rope_axes(self):
        assert canonical_config_large().rope_axes == (16, 56, 56)
        assert canonical_config_small().rope_axes == (16, 56, 56)


class TestParameterCount:
    def test_formula_is_exact(self):
        for cfg in (tiny_config(), tiny_config(dual_stream_layers=2, single_stream_layers=3)):
            model = Denoiser(cfg)
            assert parameter_count(cfg) == sum(p.numel() for p in model.parameters())

    def test_monotone_in_layers_and_dim(self):
        base = tiny_config()
        assert parameter_count(tiny_config(dual_stream_layers=2)) > parameter_count(base)
        assert parameter_count(tiny_config(single_stream_layers=2)) > parameter_count(base)
        assert parameter_count(
            tiny_config(model_dim=64, n_heads=4, ffn_dim=128)
        ) > parameter_count(base)

    def test_canonical_sizes_reported(self):
        # reported, not asserted as an exact match: within 10% of 1.6e9 / 375e6
        big = parameter_count(canonical_config_large())
        small = parameter_count(canonical_config_small())
        print(f"canonical parameter counts: large={big/1e9:.3f}B small={small/1e6:.1f}M")
        assert abs(big - 1.6e9) / 1.6e9 < 0.10
        assert abs(small - 375e6) / 375e6 < 0.10


class TestTokenCoords:
    def test_frame_indices(self):
        grid = toy_grid(4, 8)
        cond, target = frame_token_coords(2, 3, grid, 2)
        assert set(cond.t_index) == {-2.0, -1.0}
        assert set(target.t_index) == {0.0, 1.0, 2.0}
        assert len(cond) == 2 * 2 * 4
        assert len(target) == 3 * 2 * 4

    def test_latitude_mapped_into_rope_range(self):
        grid = toy_grid(8, 16)
        coords = latent_token_coords(grid, 1, [0])
        assert np.all(np.abs(coords.p_lat) <= 1.5 * np.pi)
        assert np.all((coords.p_lon >= 0) & (coords.p_lon < 2 * np.pi))


class TestPatchify:
    def test_token_count(self):
        grid = toy_grid(4, 6)
        coords = latent_token_coords(grid, 2, [0])
        proj = torch.nn.Linear(5, 8)
        block = patchify(torch.randn(1, 5, 2, 3), proj, coords, "target")
        assert block.tokens.shape == (6, 8)

    def test_identity_projection(self):
        grid = toy_grid(4, 6)
        coords = latent_token_coords(grid, 2, [0])
        proj = torch.nn.Linear(5, 5)
        with torch.no_grad():
            proj.weight.copy_(torch.eye(5))
            proj.bias.zero_()
        x = torch.randn(1, 5, 2, 3)
        block = patchify(x, proj, coords, "target")
        # token j equals the latent column at its (row, col) position
        flat = x.permute(0, 2, 3, 1).reshape(6, 5)
        assert torch.allclose(block.tokens, flat)

    def test_unpatchify_inverse_construction(self, rng):
        # build the left inverse of a random projection and round-trip tokens
        proj = torch.nn.Linear(4, 12)
        x = torch.randn(2, 4, 3, 5, dtype=torch.double)
        proj.double()
        coords = latent_token_coords(toy_grid(6, 10), 2, [0, 1])
        block = patchify(x, proj, coords, "target")
        w = proj.weight.detach().numpy()
        pinv = np.linalg.pinv(w)
        tokens = block.tokens.detach().numpy() - proj.bias.detach().numpy()
        back = (tokens @ pinv.T).reshape(2, 3, 5, 4).transpose(0, 3, 1, 2)
        assert np.allclose(back, x.numpy(), atol=1e-10)

    def test_channel_mismatch(self):
        proj = torch.nn.Linear(4, 8)
        coords = latent_token_coords(toy_grid(4, 6), 2, [0])
        with pytest.raises(ValidationError):
            patchify(torch.randn(1, 5, 2, 3), proj, coords, "target")


class TestDualStreamBlock:
    def test_empty_conditioning_reduces_to_self_attention(self):
        torch.manual_seed(0)
        blk = DualStreamBlock(32, 64, 2)
        _randomize(blk)
        cond_vec = torch.randn(32)
        x_t = torch.randn(6, 32)
        cos_t, sin_t = torch.cos(torch.randn(6, 8)), torch.sin(torch.randn(6, 8))
        empty = torch.zeros(0, 32)
        zero_ph = torch.zeros(0, 8)
        _, out_with_empty = blk(empty, x_t, cond_vec, zero_ph, zero_ph, cos_t, sin_t)
        assert out_with_empty.shape == (6, 32)
        assert torch.isfinite(out_with_empty).all()

    def test_permutation_equivariance(self):
        torch.manual_seed(1)
        blk = DualStreamBlock(32, 64, 2)
        _randomize(blk)
        cond_vec = torch.randn(32)
        n_c, n_t = 4, 6
        x_c, x_t = torch.randn(n_c, 32), torch.randn(n_t, 32)
        phases_c, phases_t = torch.randn(n_c, 8), torch.randn(n_t, 8)
        out_c, out_t = blk(x_c, x_t, cond_vec, phases_c.cos(), phases_c.sin(),
                           phases_t.cos(), phases_t.sin())
        perm = torch.randperm(n_t)
        out_c2, out_t2 = blk(x_c, x_t[perm], cond_vec, phases_c.cos(), phases_c.sin(),
                             phases_t[perm].cos(), phases_t[perm].sin())
        assert torch.allclose(out_t2, out_t[perm], atol=1e-5)
        assert torch.allclose(out_c2, out_c, atol=1e-5)


class TestForward:
    def _setup(self, cond_len=1, horizon=2, factor=2):
        grid = toy_grid(4, 6)
        cfg = tiny_config()
        torch.manual_seed(3)
        model = Denoiser(cfg)
        _randomize(model)
        cond_coords, target_coords = frame_token_coords(cond_len, horizon, grid, factor)
        z_cond = torch.randn(cond_len, 5, 2, 3)
        z_noisy = torch.randn(horizon, 5, 2, 3)
        return model, z_noisy, z_cond, cond_coords, target_coords

    def test_output_shape(self):
        model, z_noisy, z_cond, cc, tc = self._setup()
        out = model(z_noisy, z_cond, 0.25, 1.0, cc, tc)
        assert tuple(out.shape) == (2, 5, 2, 3)

    def test_purity_bit_identical(self):
        model, z_noisy, z_cond, cc, tc = self._setup()
        a = model(z_noisy, z_cond, 0.25, 1.0, cc, tc)
        b = model(z_noisy, z_cond, 0.25, 1.0, cc, tc)
        assert torch.equal(a, b)

    def test_shape_contract_fuzzing(self):
        torch.manual_seed(4)
        g = np.random.default_rng(0)
        for _ in range(5):
            heads = int(g.integers(1, 4))
            head_dim = int(g.choice([8, 16]))
            splits = {8: (4, 2, 2), 16: (4, 6, 6)}[head_dim]
            cfg = tiny_config(
                latent_channels=int(g.integers(1, 7)),
                model_dim=heads * head_dim,
                ffn_dim=int(g.choice([32, 64])),
                n_heads=heads,
                head_dim=head_dim,
                rope_axes=splits,
                preprocess_layers=int(g.integers(0, 3)),
                dual_stream_layers=int(g.integers(1, 3)),
                single_stream_layers=int(g.integers(0, 3)),
            )
            model = Denoiser(cfg)
            ell, h = int(g.integers(1, 3)), int(g.integers(1, 4))
            grid = toy_grid(4, 8)
            cc, tc = frame_token_coords(ell, h, grid, 2)
            out = model(
                torch.randn(h, cfg.latent_channels, 2, 4),
                torch.randn(ell, cfg.latent_channels, 2, 4),
                -0.5, 2.0, cc, tc,
            )
            assert tuple(out.shape) == (h, cfg.latent_channels, 2, 4)

    def test_joint_translation_invariance(self):
        model, z_noisy, z_cond, cc, tc = self._setup()
        base = model(z_noisy, z_cond, 0.1, 0.7, cc, tc)
        shifted = model(
            z_noisy, z_cond, 0.1, 0.7,
            cc.shifted(dt=5.0, dlat=0.8, dlon=-1.3),
            tc.shifted(dt=5.0, dlat=0.8, dlon=-1.3),
        )
        assert float((base - shifted).detach().abs().max()) < 1e-5

    def test_gradients_match_finite_differences(self):
        # float64 toy model on a 2x3 latent grid; directional FD per tensor
        grid = toy_grid(4, 6)
        cfg = tiny_config()
        torch.manual_seed(5)
        model = Denoiser(cfg).double()
        _randomize(model, scale=0.05)
        cc, tc = frame_token_coords(1, 1, grid, 2)
        z_cond = torch.randn(1, 5, 2, 3, dtype=torch.double)
        z_noisy = torch.randn(1, 5, 2, 3, dtype=torch.double)
        target = torch.randn(1, 5, 2, 3, dtype=torch.double)

        def loss_fn():
            out = model(z_noisy, z_cond, 0.3, 1.1, cc, tc)
            return ((out - target) ** 2).mean()

        model.zero_grad()
        loss_fn().backward()
        g = torch.Generator().manual_seed(11)
        eps = 1e-6
        for name, p in model.named_parameters():
            direction = torch.randn(p.shape, generator=g, dtype=torch.double)
            direction /= direction.norm() + 1e-12
            analytic = float((p.grad * direction).sum())
            with torch.no_grad():
                p.add_(eps * direction)
                up = float(loss_fn())
                p.sub_(2 * eps * direction)
                down = float(loss_fn())
                p.add_(eps * direction)
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(analytic), 1e-8)
            assert abs(fd - analytic) / denom < 1e-3, name

    def test_rejects_wrong_channel_count(self):
        model, z_noisy, z_cond, cc, tc = self._setup()
        with pytest.raises(ValidationError):
            model(torch.randn(2, 4, 2, 3), z_cond, 0.3, 1.0, cc, tc)

    def test_nonfinite_activation_raises(self):
        from latcast.errors import NumericalError

        model, z_noisy, z_cond, cc, tc = self._setup()
        with torch.no_grad():
            model.final.out.weight.fill_(float("inf"))
            model.final.out.bias.fill_(1.0)
        with pytest.raises(NumericalError):
            model(z_noisy, z_cond, 0.3, 1.0, cc, tc)
