import inspect
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from carff.errors import ShapeMismatchError
from carff.pcvae import (PCVAE, KLSchedule, LatentGaussian, PCVAEConfig, kl_divergence, kl_divergence_t,
                         kl_weight, load_pcvae, pcvae_loss, reparameterize, save_pcvae, train_pcvae)
from carff.scenegen import Dataset, DatasetConfig, generate_dataset

from conftest import finite_difference_check


def micro_cfg(**kw):
    base = dict(latent_dim=2, pose_count=3, width=16, height=16, channels=(2, 2), epochs=1, batch_size=8, seed=0)
    base.update(kw)
    return PCVAEConfig(**base)


# ----------------------------------------------------------------------------
# KL divergence oracles


@pytest.mark.parametrize("mu, s2, expected", [
    (0.0, 1.0, 0.0),
    (1.0, 1.0, 0.5),
    (0.0, math.e, 0.5 * (math.e - 2.0)),
])
def test_kl_hand_values(mu, s2, expected):
    assert kl_divergence(LatentGaussian([mu], [s2])) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("mu, s2", [(0.0, 1.0), (1.0, 1.0), (0.0, math.e), (-0.7, 0.3)])
def test_kl_matches_numerical_integral(mu, s2):
    q = stats.norm(mu, math.sqrt(s2))
    p = stats.norm(0.0, 1.0)
    val, _ = integrate.quad(lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x)), -40, 40, epsabs=1e-13, epsrel=1e-12)
    assert kl_divergence(LatentGaussian([mu], [s2])) == pytest.approx(val, abs=1e-9)


def test_kl_sums_over_dimensions():
    g = LatentGaussian([0.0, 1.0, 0.0], [1.0, 1.0, math.e])
    assert kl_divergence(g) == pytest.approx(0.5 + 0.5 * (math.e - 2.0), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(1e-4, 1e3)), min_size=1, max_size=8))
def test_kl_nonnegative(params):
    mu, s2 = zip(*params)
    assert kl_divergence(LatentGaussian(mu, s2)) >= -1e-12


def test_torch_kl_agrees_with_numpy():
    rng = np.random.default_rng(1)
    mu, s2 = rng.normal(size=(5, 4)), rng.uniform(0.1, 3, size=(5, 4))
    t = kl_divergence_t(torch.tensor(mu), torch.tensor(np.log(s2))).numpy()
    np.testing.assert_allclose(t, [kl_divergence(LatentGaussian(m, s)) for m, s in zip(mu, s2)], rtol=1e-12)


def test_latent_gaussian_validation():
    with pytest.raises(ShapeMismatchError):
        LatentGaussian([0.0, 0.0], [1.0])
    with pytest.raises(ValueError):
        LatentGaussian([0.0], [0.0])
    with pytest.raises(ValueError):
        LatentGaussian([np.nan], [1.0])


def test_reparameterize_with_fixed_noise():
    g = LatentGaussian([1.0, -2.0], [4.0, 0.25])
    np.testing.assert_allclose(reparameterize(g, eps=np.array([0.5, 2.0])), [2.0, -1.0])


# ----------------------------------------------------------------------------
# KL weight schedule


@pytest.mark.parametrize("epoch, expected", [(0, 1e-6), (50, 1e-6), (65, 5.5e-6), (80, 1e-5), (200, 1e-5)])
def test_kl_weight_schedule_points(epoch, expected):
    assert kl_weight(epoch, KLSchedule()) == pytest.approx(expected, rel=1e-12)


def test_kl_weight_monotone_and_continuous():
    s = KLSchedule()
    w = np.array([kl_weight(e, s) for e in range(0, 120)])
    assert np.all(np.diff(w) >= 0)
    # the ramp moves at most (w_end - w_start) / 30 per epoch
    assert np.max(np.diff(w)) <= (s.w_end - s.w_start) / 30 + 1e-18


def test_kl_schedule_rejects_bad_ranges():
    with pytest.raises(ValueError):
        KLSchedule(w_start=1e-5, w_end=1e-6)
    with pytest.raises(ValueError):
        KLSchedule(epoch_start=80, epoch_end=50)


def test_kl_schedule_defaults_match_reported_setup():
    # weight starts at 1e-6, ramps between epochs 50 and 80, ends inside the 1e-5..4e-5 range
    s = KLSchedule()
    assert (s.w_start, s.epoch_start, s.epoch_end) == (1e-6, 50, 80)
    assert 1e-5 <= s.w_end <= 4e-5


def test_default_learning_rate():
    assert PCVAEConfig().lr == 0.004
    assert PCVAEConfig().latent_dim == 8


# ----------------------------------------------------------------------------
# model contract


def test_encode_has_no_pose_argument():
    params = list(inspect.signature(PCVAE.encode).parameters)
    assert params == ["self", "image"]
    assert "pose_id" in inspect.signature(PCVAE.decode).parameters


def test_shapes_and_ranges():
    torch.manual_seed(0)
    m = PCVAE(micro_cfg())
    g = m.encode(np.random.default_rng(0).random((16, 16, 3)))
    assert g.mu.shape == (2,) and np.all(g.sigma2 > 0)
    img = m.decode(g.mu, 2)
    assert img.shape == (16, 16, 3)
    assert img.min() >= 0 and img.max() <= 1


def test_encode_batch_matches_encode():
    torch.manual_seed(0)
    m = PCVAE(micro_cfg())
    imgs = np.random.default_rng(0).random((5, 16, 16, 3)).astype(np.float32)
    mu, s2 = m.encode_batch(imgs, batch_size=2)
    for k in range(5):
        g = m.encode(imgs[k])
        np.testing.assert_allclose(mu[k], g.mu, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(s2[k], g.sigma2, rtol=1e-5)


@pytest.mark.parametrize("pose", [-1, 3, 100])
def test_decode_pose_out_of_range(pose):
    m = PCVAE(micro_cfg())
    with pytest.raises(IndexError):
        m.decode(np.zeros(2), pose)


def test_wrong_image_shape_rejected():
    m = PCVAE(micro_cfg())
    with pytest.raises(ShapeMismatchError):
        m.encode(np.zeros((8, 8, 3)))


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        pcvae_loss(torch.zeros(1, 4, 4, 3), torch.zeros(1, 4, 5, 3), torch.zeros(1, 2), torch.zeros(1, 2), 1e-6)


def test_loss_components():
    recon = torch.full((2, 4, 4, 3), 0.5)
    target = torch.zeros(2, 4, 4, 3)
    mu = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    logvar = torch.zeros(2, 2)
    total, mse, kld = pcvae_loss(recon, target, mu, logvar, 0.1)
    assert mse.item() == pytest.approx(0.25)
    assert kld.item() == pytest.approx(0.25)  # batch mean of 0.5 and 0
    assert total.item() == pytest.approx(0.25 + 0.025)


def test_vit_backbone_shapes():
    m = PCVAE(micro_cfg(backbone="vit_shaped"))
    g = m.encode(np.zeros((16, 16, 3)))
    assert g.mu.shape == (2,)
    assert m.decode(g.mu, 0).shape == (16, 16, 3)


def test_unknown_backbone():
    with pytest.raises(ValueError):
        PCVAE(micro_cfg(backbone="resnet"))


# ----------------------------------------------------------------------------
# gradient check


def test_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    m = PCVAE(micro_cfg()).double()
    gen = torch.Generator().manual_seed(3)
    x = torch.rand(2, 16, 16, 3, generator=gen, dtype=torch.float64)
    y = torch.rand(2, 16, 16, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 2, generator=gen, dtype=torch.float64)
    poses = [0, 2]

    def loss_fn():
        mu, logvar = m.forward_encode(x)
        z = mu + torch.exp(0.5 * logvar) * eps
        return pcvae_loss(m.forward_decode(z, poses), y, mu, logvar, 0.3)[0]

    params = [m.encoder.mu.weight, m.decoder.fc[0].weight, m.encoder.conv[0].weight]
    finite_difference_check(loss_fn, params, stride=7)


# ----------------------------------------------------------------------------
# training and persistence


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(DatasetConfig("blender_toy", str(out), poses=4, width=16, height=16))
    return Dataset.load(out)


def test_one_epoch_smoke(tiny_data, tmp_path):
    cfg = micro_cfg(pose_count=4, channels=(4, 4), epochs=2, save_every=0)
    model, hist = train_pcvae(tiny_data, cfg, out_path=tmp_path / "p.ckpt", metrics_path=tmp_path / "m.csv")
    assert len(hist) == 2
    assert all(np.isfinite(r["loss"]) for r in hist)
    assert (tmp_path / "p.ckpt").exists()
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "epoch,loss,mse,kld,w_kl,train_psnr"


def test_training_is_deterministic(tiny_data):
    cfg = micro_cfg(pose_count=4, channels=(4, 4), epochs=2, save_every=0)
    _, h1 = train_pcvae(tiny_data, cfg)
    _, h2 = train_pcvae(tiny_data, cfg)
    assert h1 == h2


def test_checkpoint_roundtrip_bit_identical(tiny_data, tmp_path):
    cfg = micro_cfg(pose_count=4, channels=(4, 4), epochs=1, save_every=0)
    model, _ = train_pcvae(tiny_data, cfg)
    model.eval()
    path = tmp_path / "p.ckpt"
    save_pcvae(path, model, 1)
    again = load_pcvae(path)
    img = tiny_data.images[0]
    a, b = model.encode(img), again.encode(img)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma2, b.sigma2)
    assert np.array_equal(model.decode(a.mu, 1), again.decode(b.mu, 1))


def test_training_rejects_mismatched_config(tiny_data):
    from carff.errors import DatasetError

    with pytest.raises(DatasetError):
        train_pcvae(tiny_data, micro_cfg(pose_count=5))
