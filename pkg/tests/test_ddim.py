import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffattack.backbone import LatentTensor
from diffattack.ddim import (
    NoiseSchedule,
    ddim_denoise_step,
    ddim_invert_step,
    denoise,
    forward_sample,
    guided_noise,
    invert,
    load_trajectory,
    make_schedule,
    optimize_null_text,
    save_trajectory,
)
from diffattack.errors import DomainError
from diffattack.evaluation import psnr
from diffattack.synthetic import CLASS_NAMES, as_image_tensors, generate_images
from util import ConstantNoiseBackbone, check_grads


def sched_from_alpha_bars(alpha_bars):
    betas, prev = [], 1.0
    for ab in alpha_bars:
        betas.append(1.0 - ab / prev)
        prev = ab
    return NoiseSchedule.from_betas(betas)


def lat(*values):
    return LatentTensor(torch.tensor(values, dtype=torch.float64).reshape(1, 1, -1))


class TestSchedule:
    def test_single_step_product(self):
        sched = make_schedule(1, 0.1, 0.1, 1)
        assert abs(sched.alpha_bar(1) - 0.9) < 1e-12

    def test_degenerate_zero_betas(self):
        sched = NoiseSchedule.from_betas([0.0] * 5)
        for t in range(6):
            assert sched.alpha_bar(t) == 1.0

    def test_default_sampling_grid(self):
        sched = make_schedule(1000, 1e-4, 2e-2, 20)
        assert len(sched.sample_steps) == 20
        gaps = {b - a for a, b in zip(sched.sample_steps, sched.sample_steps[1:])}
        assert gaps == {50}
        bars = [sched.alpha_bar(t) for t in sched.sample_steps]
        assert all(b2 < b1 for b1, b2 in zip(bars, bars[1:]))

    def test_invalid_ranges(self):
        with pytest.raises(DomainError):
            make_schedule(10, 0.0, 0.1, 5)
        with pytest.raises(DomainError):
            make_schedule(10, 0.2, 0.1, 5)
        with pytest.raises(DomainError):
            make_schedule(4, 1e-4, 2e-2, 5)
        with pytest.raises(DomainError):
            make_schedule(10, 1e-4, 1.0, 5)


class TestForwardSample:
    def test_closed_form_example(self):
        sched = sched_from_alpha_bars([0.81])
        out = forward_sample(lat(1.0), 1, lat(1.0), sched)
        expected = 0.9 + math.sqrt(0.19)
        assert abs(float(out.data) - expected) < 1e-9
        assert abs(expected - 1.33589) < 1e-5  # the documented value

    def test_zero_noise(self):
        sched = sched_from_alpha_bars([0.49])
        out = forward_sample(lat(2.0), 1, lat(0.0), sched)
        assert abs(float(out.data) - 0.7 * 2.0) < 1e-12

    def test_identity_at_zero(self):
        sched = sched_from_alpha_bars([0.5])
        out = forward_sample(lat(3.0), 0, lat(1.0), sched)
        assert float(out.data) == 3.0


class TestSteps:
    def test_denoise_example(self):
        sched = sched_from_alpha_bars([0.64, 0.25])
        out = ddim_denoise_step(lat(1.0), 2, 1, lat(0.0), sched)
        assert abs(float(out.data) - 1.6) < 1e-9

    def test_invert_example(self):
        sched = sched_from_alpha_bars([0.64, 0.25])
        out = ddim_invert_step(lat(1.6), 1, 2, lat(0.0), sched)
        assert abs(float(out.data) - 1.0) < 1e-9

    def test_identity_steps_bit_exact(self):
        sched = sched_from_alpha_bars([0.64, 0.25])
        x = lat(0.123456789)
        assert torch.equal(ddim_denoise_step(x, 2, 2, lat(0.5), sched).data, x.data)
        assert torch.equal(ddim_invert_step(x, 1, 1, lat(0.5), sched).data, x.data)

    def test_direction_errors(self):
        sched = sched_from_alpha_bars([0.64, 0.25])
        with pytest.raises(DomainError):
            ddim_denoise_step(lat(1.0), 1, 2, lat(0.0), sched)
        with pytest.raises(DomainError):
            ddim_invert_step(lat(1.0), 2, 1, lat(0.0), sched)
        with pytest.raises(DomainError):
            ddim_denoise_step(lat(1.0, 2.0), 2, 1, lat(0.0), sched)

    @settings(max_examples=60, deadline=None)
    @given(
        ab_pair=st.tuples(
            st.floats(0.01, 0.99), st.floats(0.01, 0.99)
        ).filter(lambda p: abs(p[0] - p[1]) > 1e-3),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_roundtrip_property(self, ab_pair, seed):
        hi, lo = max(ab_pair), min(ab_pair)
        sched = sched_from_alpha_bars([hi, lo])
        g = torch.Generator().manual_seed(seed)
        x = LatentTensor(torch.randn(2, 3, 3, generator=g, dtype=torch.float64))
        eps = LatentTensor(torch.randn(2, 3, 3, generator=g, dtype=torch.float64))
        down = ddim_denoise_step(x, 2, 1, eps, sched)
        back = ddim_invert_step(down, 1, 2, eps, sched)
        assert float((back.data - x.data).abs().max()) < 1e-6
        up = ddim_invert_step(x, 1, 2, eps, sched)
        ret = ddim_denoise_step(up, 2, 1, eps, sched)
        assert float((ret.data - x.data).abs().max()) < 1e-6


class TestGuidedNoise:
    def test_scale_one_is_conditional_exactly(self):
        bb = ConstantNoiseBackbone()
        z = LatentTensor(torch.zeros(1, 2, 2, dtype=torch.float64))
        out = guided_noise(bb, z, 1, bb.encode_text("cat"), bb.encode_text(""), 1.0)
        assert torch.equal(out.data, torch.ones(1, 2, 2, dtype=torch.float64))

    def test_scale_zero_is_unconditional(self):
        bb = ConstantNoiseBackbone()
        z = LatentTensor(torch.zeros(1, 2, 2, dtype=torch.float64))
        out = guided_noise(bb, z, 1, bb.encode_text("cat"), bb.encode_text(""), 0.0)
        assert torch.equal(out.data, torch.zeros(1, 2, 2, dtype=torch.float64))

    def test_mixing_formula(self):
        bb = ConstantNoiseBackbone()
        z = LatentTensor(torch.zeros(1, 2, 2, dtype=torch.float64))
        out = guided_noise(bb, z, 1, bb.encode_text("cat"), bb.encode_text(""), 2.5)
        assert torch.allclose(out.data, torch.full((1, 2, 2), 2.5, dtype=torch.float64))

    def test_negative_scale_rejected(self):
        bb = ConstantNoiseBackbone()
        z = LatentTensor(torch.zeros(1, 2, 2, dtype=torch.float64))
        with pytest.raises(DomainError):
            guided_noise(bb, z, 1, bb.encode_text("cat"), bb.encode_text(""), -0.5)


@pytest.fixture(scope="module")
def sched20():
    return make_schedule(1000, 1e-4, 2e-2, 20)


@pytest.fixture(scope="module")
def sample_latent(fast_backbone):
    images, labels = generate_images(1, 32, 314)
    img = as_image_tensors(images)[0]
    cond = fast_backbone.encode_text(CLASS_NAMES[int(labels[0])])
    return fast_backbone.encode_image(img), cond, img


class TestInvertDenoise:
    def test_zero_steps(self, fast_backbone, sched20, sample_latent):
        z0, cond, _ = sample_latent
        traj = invert(fast_backbone, z0, sched20, 0, cond)
        assert len(traj.latents) == 1
        assert torch.equal(traj.latents[0].data, z0.data)
        out = denoise(fast_backbone, traj.top, sched20, cond, [], 2.5)
        assert torch.equal(out.data, traj.top.data)

    def test_trajectory_shape_and_tags(self, fast_backbone, sched20, sample_latent):
        z0, cond, _ = sample_latent
        traj = invert(fast_backbone, z0, sched20, 5, cond)
        assert len(traj.latents) == 6
        assert traj.timesteps == [0, 50, 100, 150, 200, 250]
        assert traj.guidance_scale == 0.0
        assert [z.timestep_tag for z in traj.latents] == traj.timesteps

    def test_step_count_overflow(self, fast_backbone, sched20, sample_latent):
        z0, cond, _ = sample_latent
        with pytest.raises(DomainError):
            invert(fast_backbone, z0, sched20, 21, cond)

    def test_uncond_length_mismatch(self, fast_backbone, sched20, sample_latent):
        z0, cond, _ = sample_latent
        traj = invert(fast_backbone, z0, sched20, 3, cond)
        null = fast_backbone.encode_text("")
        with pytest.raises(DomainError):
            denoise(fast_backbone, traj.top, sched20, cond, [null] * 2, 2.5)

    def test_latent_roundtrip_guidance_one(self, backbone, sched20):
        images, labels = generate_images(8, 32, 555)
        null = backbone.encode_text("")
        for img, y in zip(as_image_tensors(images), labels):
            z0 = backbone.encode_image(img)
            cond = backbone.encode_text(CLASS_NAMES[int(y)])
            traj = invert(backbone, z0, sched20, 5, cond)
            zr = denoise(backbone, traj.top, sched20, cond, [null] * 5, 1.0)
            mse_per_elem = float(((zr.data - z0.data) ** 2).mean())
            assert mse_per_elem < 1e-2

    def test_denoise_gradient_finite_differences(self, fast_backbone, sched20, sample_latent):
        z0, cond, _ = sample_latent
        traj = invert(fast_backbone, z0, sched20, 3, cond)
        null = fast_backbone.encode_text("")

        def f(x):
            out = denoise(
                fast_backbone,
                LatentTensor(x, timestep_tag=traj.timesteps[-1]),
                sched20,
                cond,
                [null] * 3,
                2.5,
            )
            return (out.data ** 2).sum()

        check_grads(f, traj.top.data, n_coords=10, rel_tol=1e-3)


class TestNullText:
    def test_zero_iters_returns_null(self, fast_backbone, sched20, sample_latent):
        z0, cond, _ = sample_latent
        traj = invert(fast_backbone, z0, sched20, 3, cond)
        res = optimize_null_text(fast_backbone, traj, sched20, cond, 2.5, iters=0)
        null = fast_backbone.encode_text("")
        assert len(res.embeddings) == 3
        for e in res.embeddings:
            assert torch.equal(e.tokens, null.tokens)

    def test_scale_one_noop(self, fast_backbone, sched20, sample_latent):
        z0, cond, _ = sample_latent
        traj = invert(fast_backbone, z0, sched20, 3, cond)
        res = optimize_null_text(fast_backbone, traj, sched20, cond, 1.0)
        assert res.final_gaps == res.initial_gaps

    def test_gap_never_increases(self, backbone, sched20):
        images, labels = generate_images(4, 32, 808)
        for img, y in zip(as_image_tensors(images), labels):
            cond = backbone.encode_text(CLASS_NAMES[int(y)])
            traj = invert(backbone, backbone.encode_image(img), sched20, 5, cond)
            res = optimize_null_text(backbone, traj, sched20, cond, 2.5)
            for init, final in zip(res.initial_gaps, res.final_gaps):
                assert final <= init + 1e-15

    def test_roundtrip_reconstruction_psnr(self, backbone, sched20):
        images, labels = generate_images(4, 32, 909)
        for img, y in zip(as_image_tensors(images), labels):
            cond = backbone.encode_text(CLASS_NAMES[int(y)])
            z0 = backbone.encode_image(img)
            traj = invert(backbone, z0, sched20, 5, cond)
            res = optimize_null_text(backbone, traj, sched20, cond, 2.5)
            zr = denoise(backbone, traj.top, sched20, cond, res.embeddings, 2.5)
            assert psnr(backbone.decode_latent(zr), img) >= 25.0


def test_trajectory_dump_roundtrip(fast_backbone, sched20, sample_latent, tmp_path):
    z0, cond, _ = sample_latent
    traj = invert(fast_backbone, z0, sched20, 4, cond)
    path = tmp_path / "traj.npz"
    save_trajectory(traj, path)
    loaded = load_trajectory(path)
    assert loaded.timesteps == traj.timesteps
    assert loaded.guidance_scale == traj.guidance_scale
    for a, b in zip(loaded.latents, traj.latents):
        assert torch.equal(a.data, b.data)
