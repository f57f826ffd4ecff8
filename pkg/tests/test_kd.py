import numpy as np
import pytest

from amal import kd, metaopt, nncore
from amal.data import synthetic_splits
from amal.errors import ConfigError
from amal.metaopt import MetaConfig, MixingWeights, SupervisedObjective
from amal.nncore import SgdState


@pytest.fixture(scope="module")
def splits():
    return synthetic_splits(0, sizes=(240, 60, 60), n_classes=4, noise=0.2)


@pytest.fixture(scope="module")
def bundle(splits):
    return kd.train_teacher(splits.train, (14, 16, 4), SgdState(milestones=(3,)), 4, (2,), seed=3)


def test_fixed_row():
    assert kd.fixed_row(1, 0.9) == pytest.approx((0.1, 0.9))
    assert kd.fixed_row(3, 0.9) == pytest.approx((0.1, 0.3, 0.3, 0.3))
    assert kd.fixed_row(2, 0.0) == (1.0, 0.0, 0.0)


def test_teacher_bundle_snapshots(bundle, splits):
    assert [t.tag for t in bundle.teachers] == ["epoch2", "final"]
    for t in bundle.teachers:
        live = t.logits_for(splits.train.features)
        assert np.max(np.abs(live - t.logits)) <= 1e-12
    assert len(bundle.select(["final"])) == 1


def test_checkpoint_epoch_range(splits):
    with pytest.raises(ConfigError):
        kd.train_teacher(splits.train, (14, 4), SgdState(), 2, (5,))


def test_cached_and_live_teacher_give_same_training(bundle, splits):
    final = bundle.select(["final"])
    live = SupervisedObjective(splits.train.labels, [final.teachers[0].logits_for(splits.train.features)])
    cached = SupervisedObjective(splits.train.labels, final.cached_logits(len(splits.train)))
    p = nncore.init_mlp((14, 8, 4), 1)
    w = MixingWeights.constant(len(splits.train), (0.1, 0.9))
    a = metaopt.train_fixed(splits.train, splits.val, p, SgdState(), live, w, 2, 0)
    b = metaopt.train_fixed(splits.train, splits.val, p, SgdState(), cached, w, 2, 0)
    for x, y in zip(a.final_params.arrays(), b.final_params.arrays()):
        assert np.max(np.abs(x - y)) <= 1e-12


def test_multi_teacher_with_one_active_weight_reduces_to_single(bundle, splits):
    rng = np.random.default_rng(0)
    p = nncore.init_mlp((14, 8, 4), 2)
    x = splits.train.features[:20]
    idx = np.arange(20)
    lam = rng.uniform(0, 1, 20)
    lam_p = rng.uniform(0, 1, 20)
    both = SupervisedObjective(splits.train.labels, bundle.cached_logits(len(splits.train)))
    one = SupervisedObjective(splits.train.labels, bundle.cached_logits(len(splits.train))[1:])
    g_both = nncore.per_instance_grads(p, x, list(zip(both.terms(idx), [lam_p, np.zeros(20), lam])))
    g_one = nncore.per_instance_grads(p, x, list(zip(one.terms(idx), [lam_p, lam])))
    for a, b in zip(g_both.arrays(), g_one.arrays()):
        assert np.allclose(a, b, atol=1e-15)


def test_class_mismatch_is_config_error(bundle, splits):
    with pytest.raises(ConfigError):
        kd.run_kd((14, 8, 5), bundle, "fixed", None, splits.train, splits.val, None, 0, SgdState(), 1)
    with pytest.raises(ConfigError):
        kd.TeacherBundle([kd.Teacher("a", logits=np.zeros((3, 2))), kd.Teacher("b", logits=np.zeros((3, 4)))])


def test_unknown_mode_and_missing_meta(bundle, splits):
    with pytest.raises(ConfigError):
        kd.run_kd((14, 8, 4), bundle, "soft", None, splits.train, splits.val, None, 0, SgdState(), 1)
    with pytest.raises(ConfigError):
        kd.run_kd((14, 8, 4), bundle, "amal", None, splits.train, splits.val, None, 0, SgdState(), 1)


def test_none_mode_equals_label_only_training(bundle, splits):
    sgd = SgdState(milestones=(2,))
    res = kd.run_kd((14, 8, 4), bundle, "none", None, splits.train, splits.val, None, 4, sgd, 3)
    ref = metaopt.train_supervised(splits.train, splits.val, nncore.init_mlp((14, 8, 4), 4), sgd, 3, 4)
    for a, b in zip(res.final_params.arrays(), ref.final_params.arrays()):
        assert np.array_equal(a, b)


def test_run_kd_amal_records(bundle, splits):
    res = kd.run_kd((14, 8, 4), bundle, "amal", MetaConfig(period=2), splits.train, splits.val,
                    splits.test, 0, SgdState(), 3)
    assert res.final_lambdas.table.shape == (240, 3)
    assert res.config["mode"] == "amal" and res.config["teachers"] == ["epoch2", "final"]
    probs = res.extra["teacher_prob_at_label"]
    assert probs.shape == (240,) and np.all((probs > 0) & (probs < 1))
    fixed = kd.run_kd((14, 8, 4), bundle, "fixed", None, splits.train, splits.val, None, 0, SgdState(), 1)
    assert fixed.config["lambda_a"] == 0.9 and fixed.config["temperature"] == 4.0
    assert np.allclose(fixed.final_lambdas.table[0], (0.1, 0.45, 0.45))


def test_logits_cache_round_trip(bundle, tmp_path):
    t = bundle.teachers[1]
    kd.save_logits_cache(t, 1, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "teacher_id:1,tag:final"
    assert lines[1] == "instance_id,logit_0,logit_1,logit_2,logit_3"
    k, back = kd.load_logits_cache(tmp_path / "l.csv")
    assert k == 1 and back.tag == "final"
    assert np.array_equal(back.logits, t.logits)
    with pytest.raises(ValueError):
        back.logits_for(np.zeros((1, 14)))


def test_logits_cache_rejects_out_of_order(tmp_path):
    path = tmp_path / "l.csv"
    path.write_text("teacher_id:0,tag:x\ninstance_id,logit_0\n1,0.5\n0,0.2\n")
    with pytest.raises(ValueError):
        kd.load_logits_cache(path)


def test_self_distillation_runs(splits):
    res = kd.run_self_distillation((14, 8, 4), splits.train, splits.val, None, MetaConfig(period=2),
                                   0, SgdState(), 2)
    assert res.config["scenario"] == "self_distillation"
    assert res.final_lambdas.table.shape == (240, 2)
