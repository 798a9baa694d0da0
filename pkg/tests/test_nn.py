import math

import numpy as np
import pytest

from gpca.attention import KernelParams
from gpca.nn import (DS_MAGIC, FIXED_THETA1_CHOICES, ConfigError, Dataset, DivergenceError,
                     NoAttentionSlotError, SgdConfig, Slot, TinyCnnConfig, build_model, collect_masks,
                     cross_entropy_shift, evaluate, load_model, make_synthetic, mask_statistics, read_dataset,
                     softmax_cross_entropy, train, write_dataset)
from gpca.verify import network_gradient_error

SMALL = dict(input_shape=(1, 8, 8), conv_layers=((4, 3, 1), (6, 3, 2)), num_classes=3)


def _batch(n=4, shape=(1, 8, 8), k=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n,) + shape), rng.integers(0, k, size=n)


@pytest.mark.parametrize("slot", [s.value for s in Slot])
def test_forward_shape(slot):
    model = build_model(TinyCnnConfig(attention_slot=slot, **SMALL), seed=0)
    x, _ = _batch()
    assert model.forward(x).shape == (4, 3)


def test_attention_masks_have_channel_length():
    model = build_model(TinyCnnConfig(attention_slot="GPCA_Full"), seed=0)
    x, _ = _batch(2, (1, 28, 28))
    model.forward(x)
    assert model.attention.last_masks.shape == (2, 16)


def test_same_seed_same_parameters():
    a = build_model(TinyCnnConfig(attention_slot="GPCA_Full"), seed=5).parameters()
    b = build_model(TinyCnnConfig(attention_slot="GPCA_Full"), seed=5).parameters()
    c = build_model(TinyCnnConfig(attention_slot="GPCA_Full"), seed=6).parameters()
    assert all(na == nb and np.array_equal(pa, pb) for (na, pa), (nb, pb) in zip(a, b))
    weights = [i for i, (name, _) in enumerate(a) if name.endswith(".weight")]
    assert not any(np.array_equal(a[i][1], c[i][1]) for i in weights)


def test_config_validation():
    with pytest.raises(ConfigError):
        TinyCnnConfig(attention_slot="GPCA_Fancy")
    with pytest.raises(ConfigError):
        TinyCnnConfig(attention_slot="GPCA_FixedTheta", fixed_theta1=3.0)
    with pytest.raises(ConfigError):
        SgdConfig(learning_rate=-1.0)
    assert 64 in FIXED_THETA1_CHOICES


def test_learning_rate_schedule():
    sgd = SgdConfig(learning_rate=0.1, lr_decay_epochs=(2, 3), lr_decay_factor=0.1)
    assert [sgd.lr_at(e) for e in (1, 2, 3, 4)] == pytest.approx([0.1, 0.1, 0.01, 0.001])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    loss, d, probs = softmax_cross_entropy(logits, labels)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    h = 1e-6
    for i, j in [(0, 0), (2, 3), (4, 1)]:
        up, down = logits.copy(), logits.copy()
        up[i, j] += h
        down[i, j] -= h
        num = (softmax_cross_entropy(up, labels)[0] - softmax_cross_entropy(down, labels)[0]) / (2 * h)
        assert abs(num - d[i, j]) < 1e-8


def test_shifted_loss_is_loss_difference():
    rng = np.random.default_rng(2)
    ref = rng.normal(size=(6, 5)) * 3
    logits = ref + rng.normal(size=ref.shape) * 0.1
    labels = rng.integers(0, 5, 6)
    expected = softmax_cross_entropy(logits, labels)[0] - softmax_cross_entropy(ref, labels)[0]
    assert abs(cross_entropy_shift(logits, labels, ref) - expected) < 1e-14
    assert cross_entropy_shift(ref, labels, ref) == 0.0


@pytest.mark.parametrize("slot", ["None", "GPCA_Full", "GPCA_Local", "GPCA_MHA", "GPCA_NoPrior"])
def test_end_to_end_gradients(slot):
    model = build_model(TinyCnnConfig(attention_slot=slot, **SMALL), seed=0)
    x, labels = _batch(3)
    assert network_gradient_error(model, x, labels, max_coords=40) < 1e-4


def test_fixed_theta_has_no_trainable_kernel():
    model = build_model(TinyCnnConfig(attention_slot="GPCA_FixedTheta", **SMALL), seed=0)
    assert not any(name.startswith("attn") for name, _ in model.parameters())
    assert np.allclose(model.attention.kernel_params.theta, (1, 64, 0, 1))


def test_fixed_theta_equals_full_at_same_kernel():
    cfg_fixed = TinyCnnConfig(attention_slot="GPCA_FixedTheta", **SMALL)
    tt = KernelParams.from_theta((1, 64, 0, 1)).theta_tilde
    cfg_full = TinyCnnConfig(attention_slot="GPCA_Full", theta_tilde_init=tt, **SMALL)
    x, _ = _batch()
    a = build_model(cfg_fixed, seed=1).forward(x)
    b = build_model(cfg_full, seed=1).forward(x)
    assert np.array_equal(a, b)


def test_noprior_initial_masks_are_half():
    model = build_model(TinyCnnConfig(attention_slot="GPCA_NoPrior", **SMALL), seed=0)
    x, _ = _batch()
    model.forward(x)
    assert np.all(model.attention.last_masks == 0.5)


def _separable(n, seed):
    # horizontal vs vertical stripes with random phase: orientation survives pooling
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    images = rng.uniform(0, 0.2, size=(n, 1, 8, 8))
    for i, k in enumerate(labels):
        stripes = (np.arange(8) + rng.integers(2)) % 2 * 0.8
        images[i, 0] += stripes[:, None] if k == 0 else stripes[None, :]
    return Dataset(images, labels, 2)


@pytest.mark.parametrize("slot", ["None", "GPCA_Full"])
def test_one_epoch_on_separable_toy(slot):
    cfg = TinyCnnConfig(attention_slot=slot, input_shape=(1, 8, 8), num_classes=2,
                        conv_layers=((4, 3, 1), (8, 3, 1)))
    model = build_model(cfg, seed=0)
    data = _separable(1024, 0)
    train(model, data, SgdConfig(epochs=1, learning_rate=0.1, batch_size=16, lr_decay_epochs=()))
    # accuracy of the trained model, not the running average over the epoch
    assert evaluate(model, data) > 0.9
    assert evaluate(model, _separable(256, 1)) > 0.9


def test_zero_learning_rate_leaves_parameters():
    model = build_model(TinyCnnConfig(attention_slot="GPCA_Full", **SMALL), seed=0)
    before = [p.copy() for _, p in model.parameters()]
    ds = Dataset(*_batch(20), 3)
    train(model, ds, SgdConfig(learning_rate=0.0, weight_decay=0.0, epochs=1))
    assert all(np.array_equal(a, p) for a, (_, p) in zip(before, model.parameters()))


def test_training_is_deterministic():
    ds = Dataset(*_batch(40), 3)
    runs = []
    for _ in range(2):
        model = build_model(TinyCnnConfig(attention_slot="GPCA_Full", **SMALL), seed=3)
        runs.append(train(model, ds, SgdConfig(epochs=2, batch_size=8), ds).rows())
    assert runs[0] == runs[1]


def test_thread_count_does_not_change_results():
    ds = Dataset(*_batch(24), 3)
    out = []
    for threads in (1, 3):
        model = build_model(TinyCnnConfig(attention_slot="GPCA_Full", **SMALL), seed=3)
        model.set_threads(threads)
        train(model, ds, SgdConfig(epochs=1, batch_size=12))
        out.append([p.copy() for _, p in model.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*out))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = Dataset(*_batch(16), 3)
    model = build_model(TinyCnnConfig(attention_slot="None", **SMALL), seed=0)
    with pytest.raises(DivergenceError) as info:
        train(model, ds, SgdConfig(learning_rate=1e6, momentum=0.0, epochs=3, batch_size=4))
    assert info.value.epoch >= 1


def test_save_and_load_round_trip(tmp_path):
    model = build_model(TinyCnnConfig(attention_slot="GPCA_MHA", **SMALL), seed=4)
    path = tmp_path / "m.npz"
    model.save(path)
    loaded = load_model(path)
    x, _ = _batch()
    assert np.array_equal(model.forward(x), loaded.forward(x))


def test_synthetic_dataset():
    train_ds, test_ds = make_synthetic(train_per_class=3, test_per_class=2, seed=0)
    assert train_ds.images.shape == (30, 1, 28, 28) and len(test_ds) == 20
    assert train_ds.images.min() >= 0 and train_ds.images.max() <= 1
    again, _ = make_synthetic(train_per_class=3, test_per_class=2, seed=0)
    assert np.array_equal(train_ds.images, again.images)
    other, _ = make_synthetic(train_per_class=3, test_per_class=2, seed=1)
    assert not np.array_equal(train_ds.images, other.images)


def test_dataset_file_round_trip(tmp_path):
    ds, _ = make_synthetic(train_per_class=2, test_per_class=1, seed=0)
    path = tmp_path / "d.bin"
    write_dataset(path, ds)
    back = read_dataset(path)
    assert np.array_equal(back.labels, ds.labels) and back.num_classes == 10
    np.testing.assert_allclose(back.images, ds.images, atol=1e-6)
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" * len(DS_MAGIC) + raw[len(DS_MAGIC):])
    with pytest.raises(ConfigError):
        read_dataset(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-3])
    with pytest.raises(ConfigError):
        read_dataset(tmp_path / "short.bin")


def test_mask_statistics_invariants():
    ds, _ = make_synthetic(train_per_class=2, test_per_class=1, seed=0)
    model = build_model(TinyCnnConfig(attention_slot="GPCA_Full"), seed=0)
    stats = mask_statistics(model, ds, bins=10)
    assert stats.histogram_counts.sum() == stats.count == 20 * 16
    assert np.all((stats.channel_mean > 0) & (stats.channel_mean < 1))
    assert stats.class_means.shape == (10, 16)


def test_identical_images_give_identical_class_means():
    ds, _ = make_synthetic(train_per_class=1, test_per_class=1, seed=0)
    images = np.repeat(ds.images[:1], 10, axis=0)
    same = Dataset(images, np.arange(10), 10)
    model = build_model(TinyCnnConfig(attention_slot="GPCA_Full"), seed=0)
    stats = mask_statistics(model, same)
    assert np.all(stats.class_means == stats.class_means[0])


def test_masks_need_attention_slot():
    model = build_model(TinyCnnConfig(attention_slot="None", **SMALL), seed=0)
    with pytest.raises(NoAttentionSlotError):
        collect_masks(model, _batch()[0])


def test_slot_parsing():
    assert Slot.parse("gpca_full") is Slot.GPCA_FULL
    assert Slot.parse(Slot.NONE) is Slot.NONE
    with pytest.raises(ConfigError):
        Slot.parse("bogus")
    assert math.isfinite(SgdConfig().learning_rate)
