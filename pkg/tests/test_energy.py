import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etta.data import generate_sample
from etta.energy import (EnergyTrainConfig, PerturbConfig, curate_labels, fgsm_perturb, spatial_perturb,
                         temperature_jitter, train_energy)
from etta.losses import one_hot
from etta.networks import EnergyModel, build_seg_model, param_hash
from etta.train_seg import predict


def tiny_data(n, size=32):
    samples = [generate_sample(i, size, size) for i in range(n)]
    return np.stack([s.image for s in samples])[:, None], np.stack([s.mask for s in samples])


@pytest.fixture(scope="module")
def setup():
    x, y = tiny_data(4)
    f = build_seg_model(base_channels=4, seed=0)
    f.set_mode("eval")
    return f, x, y


def test_perturb_config_validation():
    with pytest.raises(ValueError):
        PerturbConfig(delta=-0.1)
    with pytest.raises(ValueError):
        PerturbConfig(spatial_p=2.0)


def test_fgsm_zero_delta_is_identity(setup):
    f, x, y = setup
    adv, probs = fgsm_perturb(f, x, y, 0.0)
    assert adv.tobytes() == x.tobytes()
    assert probs.tobytes() == predict(f, x)[0].tobytes()


@pytest.mark.parametrize("delta", [0.01, 0.1, 0.3])
def test_fgsm_bound_and_frozen(setup, delta):
    f, x, y = setup
    before = param_hash(f)
    adv, probs = fgsm_perturb(f, x, y, delta)
    assert np.abs(adv - x).max() <= delta + 1e-7
    assert adv.min() >= 0 and adv.max() <= 1
    assert param_hash(f) == before
    assert all(p.grad is None for p in f.parameters())
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_fgsm_negative_delta(setup):
    f, x, y = setup
    with pytest.raises(ValueError):
        fgsm_perturb(f, x, y, -0.1)


def test_spatial_identity():
    probs = np.random.default_rng(0).dirichlet(np.ones(3), (2, 32, 32)).transpose(0, 3, 1, 2).astype(np.float32)
    cfg = PerturbConfig(spatial_p=0.0, patch_dropout_rate=0.0, pixel_noise_sigma=0.0)
    out = spatial_perturb(probs, cfg, np.random.default_rng(1))
    assert out.tobytes() == probs.tobytes()


def test_full_dropout_hits_every_foreground_patch():
    _, masks = tiny_data(3)
    probs = one_hot(masks, 3)
    out = spatial_perturb(probs, PerturbConfig(spatial_p=0.0, patch_dropout_rate=1.0), np.random.default_rng(2))
    assert (out.argmax(axis=1) == 0).all()
    labels = curate_labels(out, masks, tau=1)
    fg = curate_labels(np.zeros_like(masks), masks, tau=1)  # patch contains any foreground
    np.testing.assert_array_equal(labels, fg)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_spatial_keeps_distributions(seed):
    _, masks = tiny_data(2)
    out = spatial_perturb(one_hot(masks, 3), PerturbConfig(spatial_p=1.0), np.random.default_rng(seed))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert out.min() >= 0


def test_curate_labels_onehot_is_clean():
    _, masks = tiny_data(2)
    labels = curate_labels(one_hot(masks, 3), masks)
    assert labels.shape == (2, 1, 2, 2) and not labels.any()


@pytest.mark.parametrize("wrong,expected", [(49, 0), (50, 1)])
def test_curate_labels_threshold(wrong, expected):
    masks = np.zeros((1, 16, 16), np.uint8)
    pred = masks.copy()
    pred.reshape(-1)[:wrong] = 1
    assert curate_labels(pred, masks, tau=50)[0, 0, 0, 0] == expected


def test_randomized_patch_is_ood():
    rng = np.random.default_rng(3)
    masks = rng.integers(0, 3, (2000, 16, 16), dtype=np.uint8)
    pred = rng.integers(0, 3, (2000, 16, 16), dtype=np.uint8)
    assert curate_labels(pred, masks).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 256), st.integers(0, 256), st.integers(1, 256))
def test_label_monotone_in_corruption(a, b, tau):
    lo, hi = sorted((a, b))
    masks = np.zeros((1, 16, 16), np.uint8)
    p_lo, p_hi = masks.copy(), masks.copy()
    p_lo.reshape(-1)[:lo] = 2
    p_hi.reshape(-1)[:hi] = 2
    assert curate_labels(p_lo, masks, tau) <= curate_labels(p_hi, masks, tau)


def test_curate_labels_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        curate_labels(np.zeros((1, 20, 20)), np.zeros((1, 20, 20)))


def small_energy_cfg(**kw):
    return EnergyTrainConfig(epochs=2, batch=4, lr=1e-3, warmup_steps=1, seed=0, **kw)


def test_train_energy_deterministic_and_frozen(setup):
    f, x, y = setup
    f_hash = param_hash(f)
    runs = []
    for _ in range(2):
        g = EnergyModel(3, widths=(4, 4, 4, 4), seed=0)
        _, hist = train_energy(g, f, x, y, small_energy_cfg())
        runs.append((param_hash(g), [r["loss"] for r in hist]))
        assert len(hist) == 2 and all(0 <= r["pos_fraction"] <= 1 for r in hist)
    assert runs[0] == runs[1]
    assert param_hash(f) == f_hash


def test_train_energy_detects_unfrozen_segmenter(setup):
    f, x, y = setup
    weight = f.named_params()[next(iter(f.named_params()))]

    class Leaky(type(f)):
        def __call__(self, inp):
            weight.data += 1e-3
            return super().__call__(inp)

    leaky = Leaky.__new__(Leaky)
    leaky.__dict__.update(f.__dict__)
    saved = weight.data.copy()
    try:
        with pytest.raises(RuntimeError, match="frozen"):
            train_energy(EnergyModel(3, widths=(4, 4, 4, 4)), leaky, x, y, small_energy_cfg())
    finally:
        weight.data[...] = saved


def test_train_energy_rejects_degenerate_labels(setup, caplog):
    f, x, y = setup
    g = EnergyModel(3, widths=(4, 4, 4, 4))
    with pytest.raises(RuntimeError, match="degenerate"):
        train_energy(g, f, x, y, small_energy_cfg(tau=10_000))
    assert "degenerate" in caplog.text


def test_temperature_jitter_keeps_labels():
    _, masks = tiny_data(3)
    rng = np.random.default_rng(4)
    maps = np.concatenate([one_hot(masks, 3), rng.dirichlet(np.ones(3), (3, 32, 32)).transpose(0, 3, 1, 2)])
    maps = maps.astype(np.float32)
    assert temperature_jitter(maps, 1.0, 1.0, rng) is maps
    out = temperature_jitter(maps, 0.5, 8.0, rng)
    np.testing.assert_array_equal(out.argmax(axis=1), maps.argmax(axis=1))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)
    # temperatures above 1 soften one-hot inputs
    assert temperature_jitter(maps[:3], 2.0, 8.0, rng).max() < 0.9999
