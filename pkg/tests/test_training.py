from dataclasses import replace

import numpy as np
import pytest

from spinecascade.augment import AugmentSpec
from spinecascade.nets import NetConfig
from spinecascade.phantom import PhantomSpec, generate_phantom, random_phantom_spec
from spinecascade.training import (
    TrainConfig,
    case_from_truth,
    eval_stage1,
    eval_stage2,
    match_instances,
    sample_stage1,
    sample_stage2,
    stage2_example,
    train,
)

TINY = dict(depth=1, base_width=2, width_growth=2)


@pytest.fixture(scope="module")
def cases():
    return [case_from_truth(generate_phantom(random_phantom_spec(s)), f"c{s}") for s in range(3)]


def tiny_cfg(stage, **kw):
    net = NetConfig(in_channels=1 if stage == 1 else 2, out_channels=4 if stage == 1 else 1, **TINY)
    return TrainConfig(stage=stage, net=net, augment=AugmentSpec(crop_dims=(16, 16, 16)), **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage=3)
    with pytest.raises(ValueError):
        TrainConfig(stage=2)  # semantic preset on stage 2
    with pytest.raises(ValueError):
        TrainConfig.default(1, lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig.default(1, augment=AugmentSpec(crop_dims=(30, 32, 32)))
    assert TrainConfig.default(2).net.in_channels == 2


def test_memory_holds_exactly_the_cranial_instances(cases):
    case = cases[0]
    n = case.n_instances
    big = tuple(case.image.shape)
    for k in range(1, n + 2):
        ct, memory, target = stage2_example(case, k, big, 8)
        assert np.array_equal(memory, (case.instances > 0) & (case.instances < k))
        assert np.array_equal(target, case.instances == k)
        assert ct.shape == big


def test_inference_style_patch_contains_next_vertebra(cases):
    for case in cases:
        for k in range(1, case.n_instances + 1):
            _, _, target = stage2_example(case, k, (32, 32, 32), 8)
            assert target.sum() == (case.instances == k).sum()


def test_samplers_shapes_and_determinism(cases):
    cfg = tiny_cfg(2)
    a = sample_stage2(cases, cfg, np.random.default_rng(3))
    b = sample_stage2(cases, cfg, np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == a[1].shape == a[2].shape == (16, 16, 16)
    assert not (a[1] & a[2]).any()
    img, lab = sample_stage1(cases, cfg.augment, np.random.default_rng(0))
    assert img.shape == lab.shape == (16, 16, 16) and lab.max() <= 3


@pytest.mark.parametrize("stage", [1, 2])
def test_training_is_bitwise_deterministic(cases, stage):
    cfg = tiny_cfg(stage, iterations=3, batch_size=2)
    r1, r2 = train(cases, cfg), train(cases, cfg)
    assert r1.losses == r2.losses and all(np.isfinite(r1.losses))
    for p, q in zip(r1.net.parameters(), r2.net.parameters()):
        assert np.array_equal(p.data, q.data)
    assert all(p.step_count == 3 for p in r1.net.parameters())
    r3 = train(cases, replace(cfg, seed=1))
    assert r3.losses != r1.losses


def test_eval_helpers_run(cases):
    r1 = train(cases, tiny_cfg(1, iterations=1))
    s1 = eval_stage1(r1.net, cases[:1], window=(16, 16, 16))
    assert len(s1) == len(set(np.unique(cases[0].classes)) - {0})
    r2 = train(cases, tiny_cfg(2, iterations=1))
    s2 = eval_stage2(r2.net, cases[:1], patch_dims=(16, 16, 16))
    assert len(s2) == cases[0].n_instances and all(0 <= s <= 1 for s in s2)


def test_match_instances():
    truth = np.zeros((6, 1, 1), np.uint16)
    truth[0:2] = 1
    truth[3:6] = 2
    pred = np.zeros_like(truth)
    pred[0:2] = 2
    pred[4:6] = 1
    assert match_instances(pred, truth) == [1.0, pytest.approx(0.8)]
    assert match_instances(np.zeros_like(truth), truth) == [0.0, 0.0]


def test_non_unit_spacing_rejected():
    with pytest.raises(ValueError):
        case_from_truth(generate_phantom(PhantomSpec(spacing=(1.0, 1.0, 1.25))))
