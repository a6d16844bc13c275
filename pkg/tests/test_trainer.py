import numpy as np
import pytest

from urolesion.architectures import NetworkSpec, build_network
from urolesion.checkpoint import TAG_BOTH, TAG_CYS, TAG_RANDOM, TAG_URS, load_checkpoint, save_checkpoint
from urolesion.dataset import Procedure, domain_filter
from urolesion.errors import TrainingError
from urolesion.trainer import TrainConfig, derive_seed, load_bundle, run_step, train_phase

SPEC = NetworkSpec("vgg16", (32, 32), 0.125)


def test_config_validation():
    TrainConfig(warm_epochs=0, finetune_epochs=0)
    for bad in ({"warm_lr": 0}, {"finetune_epochs": -1}, {"freeze_k": 2}, {"batch_size": 0}, {"folds": 0}):
        with pytest.raises(TrainingError):
            TrainConfig(**bad)


def test_zero_epochs_leave_weights_bitwise_equal(tmp_path, tiny_manifest):
    net = build_network(SPEC, 2)
    save_checkpoint(net, TAG_RANDOM, tmp_path / "a.ckpt")
    before = {k: v.copy() for k, v in net.state_dict().items()}
    run_step(net, tiny_manifest, TrainConfig(warm_epochs=0, finetune_epochs=0), TAG_BOTH, tmp_path / "b.ckpt")
    after, prov = load_checkpoint(tmp_path / "b.ckpt")
    for k, v in before.items():
        assert after.state_dict()[k].tobytes() == v.tobytes()
    assert [p["tag"] for p in prov] == [TAG_RANDOM, TAG_BOTH]


def test_training_lowers_loss_and_respects_freeze(tiny_manifest):
    net = build_network(SPEC, 0)
    cfg = TrainConfig(warm_epochs=2, warm_lr=1e-3, finetune_epochs=4, batch_size=8)
    _, rec = run_step(net, tiny_manifest, cfg, TAG_BOTH, seed=1)
    assert rec.frozen_violations == 0
    assert rec.frozen_checked == 2 * len(rec.frozen_layers) == 24  # weight and bias per conv
    fine = rec.loss_trace["finetune"]
    assert len(rec.loss_trace["warm"]) == 2 and len(fine) == 4
    assert fine[-1] < rec.loss_trace["warm"][0]
    # the freeze is lifted after the step
    assert all(l.trainable for l in net.parameterized_layers())


def test_train_phase_is_deterministic(tiny_manifest):
    x = tiny_manifest.images()
    y = tiny_manifest.one_hot()
    runs = []
    for _ in range(2):
        net = build_network(SPEC, 0)
        runs.append((train_phase(net, x, y, 2, 1e-3, 16, 5), net.state_hash()))
    assert runs[0] == runs[1]


def test_run_step_errors(tiny_manifest):
    net = build_network(SPEC, 0)
    cfg = TrainConfig(warm_epochs=0, finetune_epochs=0)
    with pytest.raises(TrainingError):
        run_step(net, tiny_manifest[:0], cfg, TAG_CYS)
    with pytest.raises(TrainingError):
        run_step(net, tiny_manifest.filter(lambda s: s.label.index == 1), cfg, TAG_CYS)
    with pytest.raises(TrainingError):
        run_step(build_network(NetworkSpec("vgg16", (64, 64), 0.125)), tiny_manifest, cfg, TAG_CYS)


def test_derive_seed_stable():
    assert derive_seed(1, 2) == derive_seed(1, 2) != derive_seed(2, 1)


# shared bundle checks

def test_bundle_provenance_chains(tiny_bundle):
    expected = {(1, 1): [TAG_RANDOM, TAG_CYS], (1, 2): [TAG_RANDOM, TAG_CYS, TAG_URS],
                (2, 1): [TAG_RANDOM, TAG_URS], (2, 2): [TAG_RANDOM, TAG_URS, TAG_CYS],
                (3, 1): [TAG_RANDOM, TAG_BOTH]}
    assert len(tiny_bundle.records) == 2 * 5
    for rec in tiny_bundle.records:
        assert rec.end_provenance == expected[(rec.scenario, rec.step)]
        _, prov = load_checkpoint(tiny_bundle.root / rec.end_checkpoint)
        assert [p["tag"] for p in prov] == rec.end_provenance


def test_step_two_continues_from_step_one(tiny_bundle):
    for sc in (1, 2):
        for fold in (0, 1):
            s1, = tiny_bundle.select(scenario=sc, fold=fold, step=1)
            s2, = tiny_bundle.select(scenario=sc, fold=fold, step=2)
            assert s2.start_hash == s1.end_hash
            assert s2.start_checkpoint == s1.end_checkpoint


def test_train_and_heldout_are_disjoint(tiny_bundle, tiny_manifest):
    for rec in tiny_bundle.records:
        held = {i for ev in rec.evals.values() for i in ev["ids"]}
        assert held.isdisjoint(rec.train_ids)
        assert rec.frozen_violations == 0


def test_folds_are_reused_across_steps(tiny_bundle, tiny_manifest):
    cys = set(domain_filter(tiny_manifest, [Procedure.CYS]).ids)
    for fold in (0, 1):
        s1, = tiny_bundle.select(scenario=1, fold=fold, step=1)
        s2, = tiny_bundle.select(scenario=2, fold=fold, step=2)
        s3, = tiny_bundle.select(scenario=3, fold=fold, step=1)
        assert set(s1.train_ids) == set(s2.train_ids) == set(s3.train_ids) & cys
        assert s1.evals["CYS"]["ids"] == s3.evals["CYS"]["ids"]


def test_bundle_reloads(tiny_bundle):
    again = load_bundle(tiny_bundle.root)
    assert again.meta == tiny_bundle.meta
    assert [r.to_dict() for r in again.records] == [r.to_dict() for r in tiny_bundle.records]
    scores = np.array(again.records[0].evals["CYS"]["scores"])
    assert np.all((scores >= 0) & (scores <= 1))
