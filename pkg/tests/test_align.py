import numpy as np
import pytest

from armar import align, arvae, invariance, nn


@pytest.fixture(scope="module")
def acfg():
    return align.AlignConfig()


@pytest.fixture(scope="module")
def net(acfg):
    return align.AlignNet(acfg, seed=21)


def _priors(acfg, batch, with_metal=True, tag=1):
    mask = np.zeros((batch, 64, 64), dtype=np.float32)
    if with_metal:
        mask[:, 28:40, 28:40] = 1.0
    return align.build_priors(mask, [tag] * batch, acfg)


def test_fresh_network_is_identity(net, acfg, rng):
    z = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    out = align.align_forward(net, z, _priors(acfg, 2))
    assert np.array_equal(out.data, z)


def test_output_shape_matches_input(net, acfg, rng):
    z = rng.normal(size=(3, 4, 8, 8)).astype(np.float32)
    assert align.align_forward(net, z, _priors(acfg, 3)).shape == (3, 4, 8, 8)


def test_shape_mismatch_rejected(net, acfg):
    with pytest.raises(ValueError):
        align.align_forward(net, np.zeros((1, 4, 16, 16), np.float32), _priors(acfg, 1))
    with pytest.raises(ValueError, match="batch"):
        align.align_forward(net, np.zeros((2, 4, 8, 8), np.float32), _priors(acfg, 1))


def test_output_shape_for_other_configs(rng):
    cfg = align.AlignConfig(depth=1, widths=(32,), latent_size=8)
    n = align.AlignNet(cfg, seed=2)
    z = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    assert align.align_forward(n, z, _priors(cfg, 1)).shape == (1, 4, 8, 8)
    plain = align.AlignConfig(use_priors=False, use_transformer=False)
    pn = align.AlignNet(plain, seed=3)
    out = align.align_forward(pn, z, align.build_priors(np.zeros((1, 64, 64)), [0], plain))
    assert out.shape == (1, 4, 8, 8)
    assert np.array_equal(out.data, z)     # zero-init holds for the plain variant too


def test_config_validation():
    with pytest.raises(ValueError):
        align.AlignConfig(depth=0, widths=())
    with pytest.raises(ValueError):
        align.AlignConfig(depth=2, widths=(64,))
    with pytest.raises(ValueError):
        align.AlignConfig(depth=3, widths=(8, 8, 8), latent_size=4)


class TestPriors:
    def test_one_hot_rows(self, acfg):
        pb = _priors(acfg, 3, tag=2)
        assert pb.one_hot.shape == (3, 4)
        assert np.allclose(pb.one_hot.sum(axis=1), 1.0)
        assert np.all(pb.one_hot[:, 2] == 1.0)

    def test_none_tag_uses_its_own_row(self, acfg):
        pb = _priors(acfg, 1, tag=0)
        assert pb.one_hot[0, 0] == 1.0 and pb.one_hot.sum() == 1.0

    def test_masks_binary_at_all_levels(self, acfg):
        pb = _priors(acfg, 2)
        assert [m.shape[-1] for m in pb.masks] == [8, 4, 2]
        for m in pb.masks:
            assert set(np.unique(m)) <= {0.0, 1.0}

    def test_downsample_majority_rule(self):
        mask = np.zeros((1, 16, 16), dtype=np.float32)
        mask[0, 0:2, 0:2] = 1.0                   # exactly half an 8x-reduced... no: 4/4 of a 2x2 cell
        out = align.downsample_mask(mask, 8)      # 2x reduction, cell (0,0) fully metal
        assert out[0, 0, 0] == 1.0
        assert out.sum() == 1.0
        half = np.zeros((1, 4, 4), dtype=np.float32)
        half[0, 0, 0:2] = 1.0                     # half of the 2x2 corner cell
        assert align.downsample_mask(half, 2)[0, 0, 0] == 1.0    # >= 0.5 rounds up

    def test_metal_survives_to_latent_resolution(self, acfg):
        pb = _priors(acfg, 1, with_metal=True)
        assert pb.masks[0].sum() >= 1.0


def test_mask_conditioning_changes_output_after_training_step(acfg, rng):
    net = align.AlignNet(acfg, seed=4)
    opt = nn.AdamW(list(net.parameters()), lr=1e-2)
    z = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    z_ref = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    vcfg = arvae.ArVaeConfig(widths=(4, 8, 8), image_size=64)
    vae = arvae.ArVae(vcfg, seed=5).set_trainable(False)
    tgt = rng.normal(size=(2, 1, 64, 64)).astype(np.float32) * 0.1
    for _ in range(3):
        align.align_train_step(net, opt, vae, None, (z, z_ref, tgt, _priors(acfg, 2)),
                               alpha=1.0, beta=0.0)
    with_metal = align.align_forward(net, z, _priors(acfg, 2, with_metal=True))
    without = align.align_forward(net, z, _priors(acfg, 2, with_metal=False))
    assert not np.array_equal(with_metal.data, without.data)


def test_implant_swap_changes_output_after_training(acfg, rng):
    net = align.AlignNet(acfg, seed=6)
    opt = nn.AdamW(list(net.parameters()), lr=1e-2)
    z = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    vcfg = arvae.ArVaeConfig(widths=(4, 8, 8), image_size=64)
    vae = arvae.ArVae(vcfg, seed=7).set_trainable(False)
    tgt = rng.normal(size=(1, 1, 64, 64)).astype(np.float32) * 0.1
    for _ in range(3):
        align.align_train_step(net, opt, vae, None,
                               (z, z * 0.5, tgt, _priors(acfg, 1, tag=1)),
                               alpha=1.0, beta=0.0)
    a = align.align_forward(net, z, _priors(acfg, 1, tag=1))
    b = align.align_forward(net, z, _priors(acfg, 1, tag=3))
    assert not np.array_equal(a.data, b.data)


def test_loss_composition_closed_form():
    assert np.isclose(align.compose_loss(0.04, 0.10, 2.0, alpha=1.0, beta=0.001),
                      0.142, atol=1e-9)


def test_beta_zero_excludes_invariance(acfg, rng):
    net = align.AlignNet(acfg, seed=8)
    opt = nn.AdamW(list(net.parameters()), lr=0.0)     # lr 0: probe losses only
    vcfg = arvae.ArVaeConfig(widths=(4, 8, 8), image_size=64)
    vae = arvae.ArVae(vcfg, seed=9).set_trainable(False)
    z = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    tgt = rng.normal(size=(1, 1, 64, 64)).astype(np.float32) * 0.1
    losses = align.align_train_step(net, opt, vae, None, (z, z, tgt, _priors(acfg, 1)),
                                    alpha=1.0, beta=0.0)
    assert losses["invariance"] == 0.0
    assert np.isclose(losses["total"], losses["image"] + losses["latent"], atol=1e-7)


def test_perfect_alignment_zero_losses(acfg, rng):
    net = align.AlignNet(acfg, seed=10)   # identity at init
    opt = nn.AdamW(list(net.parameters()), lr=0.0)
    vcfg = arvae.ArVaeConfig(widths=(4, 8, 8), image_size=64)
    vae = arvae.ArVae(vcfg, seed=11).set_trainable(False)
    z = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    target = vae.decode_clean(nn.Tensor(z)).data      # decode of the aligned latent
    losses = align.align_train_step(net, opt, vae, None, (z, z, target, _priors(acfg, 1)),
                                    alpha=1.0, beta=0.0)
    assert losses["latent"] == 0.0
    assert losses["image"] == 0.0


def test_gradient_isolation_frozen_stacks(acfg, rng):
    net = align.AlignNet(acfg, seed=12)
    opt = nn.AdamW(list(net.parameters()), lr=1e-2)
    vcfg = arvae.ArVaeConfig(widths=(4, 8, 8), image_size=64)
    vae = arvae.ArVae(vcfg, seed=13).set_trainable(False)
    icfg = invariance.ContrastiveConfig(feature_channels=8)
    enc_n, enc_g = invariance.build_encoders(icfg, seed=14)
    enc_n.set_trainable(False)
    enc_g.set_trainable(False)
    vae_sum = vae.param_checksum()
    inv_sum = enc_n.param_checksum() + enc_g.param_checksum()
    z = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    tgt = rng.normal(size=(2, 1, 64, 64)).astype(np.float32) * 0.1
    net_sum = net.param_checksum()
    align.align_train_step(net, opt, vae, (enc_n, enc_g),
                           (z, z * 0.5, tgt, _priors(acfg, 2)), alpha=1.0, beta=0.001)
    assert vae.param_checksum() == vae_sum
    assert enc_n.param_checksum() + enc_g.param_checksum() == inv_sum
    assert net.param_checksum() != net_sum


def test_unfrozen_vae_trips_assertion(acfg, rng):
    net = align.AlignNet(acfg, seed=15)
    opt = nn.AdamW(list(net.parameters()), lr=1e-2)
    vcfg = arvae.ArVaeConfig(widths=(4, 8, 8), image_size=64)
    vae = arvae.ArVae(vcfg, seed=16)      # trainable: not frozen
    z = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    tgt = np.zeros((1, 1, 64, 64), dtype=np.float32)
    with pytest.raises(AssertionError, match="frozen"):
        align.align_train_step(net, opt, vae, None, (z, z, tgt, _priors(acfg, 1)),
                               alpha=1.0, beta=0.0)


def test_meta_roundtrip(acfg):
    net = align.AlignNet(acfg, seed=17)
    meta = {k: (v if np.isscalar(v) else list(v)) for k, v in net.meta().items()}
    rebuilt = align.AlignNet.config_from_meta(meta)
    assert rebuilt == acfg
