"""Trainer: learning-rate schedule, SGD update arithmetic, augmentation
statistics, and the descending-loss smoke run."""

import math

import numpy as np
import pytest

from lsnet import network, ops, train
from lsnet.errors import DataError, TrainingError, UsageError
from lsnet.phantom import PhantomConfig, generate_phantom
from lsnet.volume import Volume


def test_lr_schedule_values():
    cfg = train.TrainConfig(epochs=50)
    assert train.lr_at_epoch(cfg, 0) == 0.001
    assert abs(train.lr_at_epoch(cfg, 1) - 0.0009) < 1e-18
    assert abs(train.lr_at_epoch(cfg, 10) - 0.001 * 0.9 ** 10) <= \
        math.ulp(0.001 * 0.9 ** 10)
    assert abs(train.lr_at_epoch(cfg, 10) - 3.48678e-4) < 1e-9


def test_lr_sequence_is_geometric():
    cfg = train.TrainConfig(epochs=50)
    vals = [train.lr_at_epoch(cfg, k) for k in range(50)]
    for k in range(1, 50):
        assert vals[k] == pytest.approx(vals[k - 1] * 0.9, rel=1e-15)


def test_lr_out_of_range():
    cfg = train.TrainConfig(epochs=5)
    with pytest.raises(UsageError):
        train.lr_at_epoch(cfg, 5)
    with pytest.raises(UsageError):
        train.lr_at_epoch(cfg, -1)


def _single_param(w):
    return {"w": ops.Param(np.array([w], dtype=np.float64))}


def test_sgd_single_step():
    params = _single_param(1.0)
    params["w"].grad[...] = 0.5
    train.sgd_step(params, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert params["w"].momentum[0] == pytest.approx(0.05)
    assert params["w"].value[0] == pytest.approx(0.95)
    assert params["w"].grad[0] == 0.0


def test_sgd_second_identical_step():
    params = _single_param(1.0)
    for _ in range(2):
        params["w"].grad[...] = 0.5
        train.sgd_step(params, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert params["w"].momentum[0] == pytest.approx(0.095)
    assert params["w"].value[0] == pytest.approx(0.855)


def test_sgd_weight_decay_only():
    params = _single_param(2.0)
    train.sgd_step(params, lr=0.1, momentum=0.9, weight_decay=0.0005)
    assert params["w"].value[0] == pytest.approx(2.0 - 0.1 * 0.0005 * 2.0)


def test_sgd_zero_grad_zero_decay_is_noop():
    params = _single_param(1.5)
    train.sgd_step(params, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert params["w"].value[0] == 1.5


def test_sgd_nonfinite_gradient_names_param():
    params = _single_param(1.0)
    params["w"].grad[...] = np.nan
    with pytest.raises(TrainingError) as ei:
        train.sgd_step(params, 0.1, 0.9, 0.0)
    assert "'w'" in str(ei.value)


def _toy_volume(nz=8, n=32):
    rng = np.random.default_rng(0)
    img = Volume(rng.normal(0, 50, (nz, n, n)).astype(np.float32), (1, 1, 1))
    lab = Volume(rng.integers(0, 3, (nz, n, n)).astype(np.uint8), (1, 1, 1),
                 "labels")
    return img, lab


def test_sample_determinism_and_shapes():
    img, lab = _toy_volume()
    x1, y1 = train.sample_training_stack(img, lab, np.random.default_rng(5),
                                         crop=16, k=5)
    x2, y2 = train.sample_training_stack(img, lab, np.random.default_rng(5),
                                         crop=16, k=5)
    assert x1.shape == (1, 5, 16, 16) and y1.shape == (16, 16)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)


def test_flip_is_involution():
    img, lab = _toy_volume()
    x, y = train.sample_training_stack(img, lab, np.random.default_rng(1),
                                       crop=16, k=3, flip_prob=0.0, z=4)
    xf = x[:, :, :, ::-1][:, :, :, ::-1]
    yf = y[:, ::-1][:, ::-1]
    assert np.array_equal(x, xf) and np.array_equal(y, yf)


def test_flip_frequency_within_three_sigma():
    img, lab = _toy_volume(nz=4, n=16)
    rng = np.random.default_rng(123)
    p = 0.5
    n_draws = 10_000
    flips = 0
    base, _ = train.sample_training_stack(img, lab, np.random.default_rng(0),
                                          crop=16, k=3, flip_prob=0.0, z=2)
    for _ in range(n_draws):
        x, _y = train.sample_training_stack(img, lab, rng, crop=16, k=3,
                                            flip_prob=p, z=2)
        if not np.array_equal(x, base):
            flips += 1
    sigma = math.sqrt(n_draws * p * (1 - p))
    assert abs(flips - n_draws * p) < 3 * sigma


def test_flip_preserves_label_frequencies():
    img, lab = _toy_volume()
    hist_plain = np.bincount(
        train.sample_training_stack(img, lab, np.random.default_rng(2),
                                    crop=16, k=3, flip_prob=0.0, z=3)[1].ravel(),
        minlength=3)
    hist_flip = np.bincount(
        train.sample_training_stack(img, lab, np.random.default_rng(2),
                                    crop=16, k=3, flip_prob=1.0, z=3)[1].ravel(),
        minlength=3)
    assert np.array_equal(hist_plain, hist_flip)


def test_crop_larger_than_volume_is_data_error():
    img, lab = _toy_volume(n=16)
    with pytest.raises(DataError):
        train.sample_training_stack(img, lab, np.random.default_rng(0), crop=32)


def _phantom_cases(n_cases=2):
    cases = []
    cfg = PhantomConfig(dims=(32, 32, 12), spacing=(3.0, 3.0, 6.0),
                        liver_semiaxes_mm=((30, 40), (30, 40), (24, 32)),
                        lesion_radius_mm=(8.0, 12.0), lesion_count=(1, 2))
    for s in range(n_cases):
        img, lab = generate_phantom(s, cfg)
        cases.append(train.TrainingCase(image=img, labels=lab,
                                        zs=range(3, 9)))
    return cases


def _toy_net(seed=1, num_classes=3):
    spec = network.NetSpec(level_channels=(4, 8), encoder_convs=(1, 1),
                           decoder_convs=(1,), num_classes=num_classes,
                           crop_train=32)
    return network.build_network(spec, seed=seed)


def test_epochs_zero_returns_net_unchanged():
    net = _toy_net()
    before = {k: p.value.copy() for k, p in net.params.items()}
    cfg = train.TrainConfig(epochs=0, crop=32, batch_size=2, seed=7)
    net2, reports = train.train_model(net, _phantom_cases(1), cfg)
    assert reports == []
    for k in before:
        assert np.array_equal(before[k], net2.params[k].value)


def test_empty_dataset_rejected():
    cfg = train.TrainConfig(epochs=1, crop=32, batch_size=2)
    with pytest.raises(DataError):
        train.train_model(_toy_net(), [], cfg)


def test_loss_decreases_on_phantom_smoke_run():
    cases = _phantom_cases(2)
    net = _toy_net(seed=2)
    cfg = train.TrainConfig(epochs=5, crop=32, batch_size=4, seed=3)
    _, reports = train.train_model(net, cases, cfg)
    assert len(reports) == 5
    assert [r.lr for r in reports] == [0.001 * 0.9 ** k for k in range(5)]
    assert reports[4].mean_loss < reports[0].mean_loss
    # smoke criterion: >= 30% reduction from epoch 1 to epoch 5
    assert reports[4].mean_loss <= 0.7 * reports[0].mean_loss


def test_fixed_seed_training_bit_identical(tmp_path):
    outs = []
    for run in range(2):
        net = _toy_net(seed=4)
        cfg = train.TrainConfig(epochs=2, crop=32, batch_size=2, seed=9)
        net, _ = train.train_model(net, _phantom_cases(1), cfg)
        path = tmp_path / f"run{run}.ckpt"
        network.save_checkpoint(net, path)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
