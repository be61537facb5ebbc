import numpy as np
import pytest

from tsrpipe import model
from tsrpipe.annotate import TissueClass
from tsrpipe.cohort import LabeledPatch
from tsrpipe.errors import (
    CheckpointError,
    EmptyBatchError,
    EmptyGridError,
    MalformedRowError,
    MissingCorpusError,
    MissingPatchIdError,
    NonNormalizedRowError,
    TooFewPatchesError,
    WrongPatchSizeError,
)
from tsrpipe.model import (
    MiniNet,
    MiniNetClassifier,
    PatchDataset,
    Setup,
    TrainConfig,
    classify_manifest,
    cross_validate,
    evaluate_accuracy,
    external_classifier,
    forward,
    gradient_check,
    loss_and_gradients,
    run_setup,
    train,
    train_early_stop,
)
from tsrpipe.raster import RgbImage
from tsrpipe.synth import gen_corpus, gen_patch

T, S, O = TissueClass.TUMOR, TissueClass.STROMA, TissueClass.OTHER


def toy_corpus(n_per_class=20, seed=0):
    return gen_corpus(n_per_class=n_per_class, seed=seed)


def small_batch(seed=0, n=2):
    return [(gen_patch(TissueClass(1 + (seed + i) % 3), seed=100 * seed + i),
             TissueClass(1 + (seed + i) % 3)) for i in range(n)]


class TestForward:
    def test_probs_sum_to_one(self):
        net = MiniNet.init_random(0)
        probs = forward(net, gen_patch(T, seed=0))
        assert probs.shape == (3,)
        assert np.all(probs >= 0)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_zero_weights_uniform(self):
        net = MiniNet(**{k: np.zeros(s) for k, s in model.PARAM_SHAPES.items()})
        probs = forward(net, gen_patch(S, seed=1))
        assert np.allclose(probs, 1 / 3, atol=1e-12)

    def test_wrong_size_rejected(self):
        net = MiniNet.init_random(0)
        bad = RgbImage(np.zeros((100, 100, 3), dtype=np.uint8))
        with pytest.raises(WrongPatchSizeError):
            forward(net, bad)

    def test_softmax_shift_invariance(self):
        net = MiniNet.init_random(1)
        shifted = net.copy()
        shifted.fc_b += 17.0  # constant logit shift
        patch = gen_patch(O, seed=2)
        assert np.allclose(forward(net, patch), forward(shifted, patch), atol=1e-12)


class TestLossAndGradients:
    def test_uniform_prediction_ln3(self):
        net = MiniNet(**{k: np.zeros(s) for k, s in model.PARAM_SHAPES.items()})
        loss, _ = loss_and_gradients(net, small_batch())
        assert loss == pytest.approx(np.log(3.0), abs=1e-12)

    def test_confident_correct_prediction_near_zero(self):
        net = MiniNet(**{k: np.zeros(s) for k, s in model.PARAM_SHAPES.items()})
        patch = gen_patch(T, seed=3)
        net.fc_b[:] = [50.0, 0.0, 0.0]  # forces p_tumor ~ 1
        loss, _ = loss_and_gradients(net, [(patch, T)])
        assert loss < 1e-9

    def test_empty_batch(self):
        with pytest.raises(EmptyBatchError):
            loss_and_gradients(MiniNet.init_random(0), [])

    def test_weight_decay_term(self):
        net = MiniNet.init_random(2)
        batch = small_batch(1)
        base, _ = loss_and_gradients(net, batch, weight_decay=0.0)
        decayed, _ = loss_and_gradients(net, batch, weight_decay=0.1)
        norm2 = sum(float(np.sum(v * v)) for v in net.params().values())
        assert decayed == pytest.approx(base + 0.05 * norm2, abs=1e-12)

    def test_gradients_match_finite_differences(self):
        # dense check on one seed (all biases, 200 components per weight tensor)
        net = MiniNet.init_random(0)
        ds = PatchDataset.from_pairs(small_batch(0))
        res = gradient_check(net, ds, seed=0, samples_per_tensor=200)
        assert all(v < 1e-4 for v in res.values()), res

    def test_gradients_with_weight_decay(self):
        net = MiniNet.init_random(3)
        ds = PatchDataset.from_pairs(small_batch(3))
        res = gradient_check(net, ds, seed=3, samples_per_tensor=40, weight_decay=1e-3)
        assert all(v < 1e-4 for v in res.values()), res


class TestTrain:
    def test_lr_zero_keeps_weights(self):
        net = MiniNet.init_random(4)
        cfg = TrainConfig(learning_rate=0.0, batch_size=4, epochs_max=3, seed=0)
        trained, _ = train(net, toy_corpus(4), cfg)
        for name in model.PARAM_ORDER:
            assert np.array_equal(getattr(trained, name), getattr(net, name))

    def test_separable_toy_reaches_95(self):
        corpus = toy_corpus(20, seed=5)  # 60 patches
        cfg = TrainConfig(learning_rate=0.05, batch_size=16, epochs_max=50, seed=1)
        net, trace = train(MiniNet.init_random(5), corpus, cfg)
        assert trace[-1].train_accuracy >= 0.95

    def test_bitwise_deterministic(self):
        corpus = toy_corpus(4, seed=6)
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs_max=3, seed=2)
        init = MiniNet.init_random(6)
        a, trace_a = train(init, corpus, cfg)
        b, trace_b = train(init, corpus, cfg)
        assert trace_a == trace_b
        for name in model.PARAM_ORDER:
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_too_few_patches(self):
        cfg = TrainConfig(batch_size=64)
        with pytest.raises(TooFewPatchesError):
            train(MiniNet.init_random(0), toy_corpus(2), cfg)

    def test_small_step_does_not_increase_batch_loss(self):
        rng = np.random.default_rng(7)
        for trial in range(20):
            net = MiniNet.init_random(int(rng.integers(0, 10_000)))
            batch = small_batch(trial, n=4)
            loss0, grads = loss_and_gradients(net, batch)
            stepped = net.copy()
            for name, g in grads.items():
                getattr(stepped, name)[...] -= 1e-4 * g
            loss1, _ = loss_and_gradients(stepped, batch)
            assert loss1 <= loss0 + 1e-12


class TestEarlyStop:
    def test_constant_validation_stops_at_patience(self):
        # lr 0: validation accuracy is constant, the first epoch is best
        corpus = toy_corpus(6, seed=8)
        cfg = TrainConfig(learning_rate=0.0, batch_size=6, epochs_max=30,
                          seed=3, patience=4)
        optimal, _, traces = train_early_stop(MiniNet.init_random(8), corpus, cfg)
        assert optimal == 1
        assert len(traces["val_accuracy"]) == cfg.patience + 1

    def test_never_triggering_runs_to_max(self):
        # patience larger than epochs_max can never trigger
        corpus = toy_corpus(6, seed=9)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, epochs_max=4,
                          seed=4, patience=50)
        optimal, _, traces = train_early_stop(MiniNet.init_random(9), corpus, cfg)
        assert len(traces["val_accuracy"]) == 4
        best = max(traces["val_accuracy"])
        assert traces["val_accuracy"][optimal - 1] == best
        assert optimal == traces["val_accuracy"].index(best) + 1  # earliest tie

    def test_phase_two_is_reproducible(self):
        corpus = toy_corpus(6, seed=10)
        cfg = TrainConfig(learning_rate=0.05, batch_size=8, epochs_max=6, seed=5)
        init = MiniNet.init_random(10)
        optimal, final, _ = train_early_stop(init, corpus, cfg)
        from dataclasses import replace
        rerun, _ = train(init, corpus, replace(cfg, epochs_max=optimal))
        for name in model.PARAM_ORDER:
            assert np.array_equal(getattr(final, name), getattr(rerun, name))


class TestCrossValidate:
    def test_single_config_returned(self):
        corpus = toy_corpus(5, seed=11)
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs_max=2, seed=0)
        best, results = cross_validate([cfg], corpus, k=5, seed=0)
        assert best == cfg
        assert len(results) == 1

    def test_zero_lr_loses_to_real_lr(self):
        corpus = toy_corpus(10, seed=12)
        dead = TrainConfig(learning_rate=0.0, batch_size=8, epochs_max=8, seed=0)
        live = TrainConfig(learning_rate=0.05, batch_size=8, epochs_max=8, seed=0)
        best, results = cross_validate([dead, live], corpus, k=5, seed=1)
        assert best == live
        assert results[1][1] > results[0][1]

    def test_score_is_mean_of_folds(self):
        corpus = toy_corpus(5, seed=13)
        cfg = TrainConfig(learning_rate=0.05, batch_size=4, epochs_max=2, seed=0)
        _, results = cross_validate([cfg], corpus, k=5, seed=2)
        assert 0.0 <= results[0][1] <= 1.0

    def test_empty_grid(self):
        with pytest.raises(EmptyGridError):
            cross_validate([], toy_corpus(5), k=5, seed=0)


class TestRunSetup:
    def small_cfg(self, seed=0):
        return TrainConfig(learning_rate=0.05, batch_size=8, epochs_max=3, seed=seed)

    def test_setup2_ignores_domain(self):
        generic = toy_corpus(4, seed=14)
        target = toy_corpus(6, seed=15)
        net, provenance = run_setup(Setup.SETUP2, generic, [], target, self.small_cfg())
        stage_names = [s["name"] for s in provenance["stages"]]
        assert "domain_pretrain" not in stage_names
        assert "generic_pretrain" in stage_names

    def test_setup3_deterministic(self):
        domain = toy_corpus(4, seed=16)
        target = toy_corpus(6, seed=17)
        a, _ = run_setup(Setup.SETUP3, [], domain, target, self.small_cfg(7))
        b, _ = run_setup(Setup.SETUP3, [], domain, target, self.small_cfg(7))
        for name in model.PARAM_ORDER:
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_missing_corpus(self):
        target = toy_corpus(6, seed=18)
        with pytest.raises(MissingCorpusError):
            run_setup(Setup.SETUP1, [], toy_corpus(2), target, self.small_cfg())
        with pytest.raises(MissingCorpusError):
            run_setup(Setup.SETUP3, toy_corpus(2), [], target, self.small_cfg())

    def test_setup1_with_zero_domain_epochs_equals_setup2(self):
        generic = toy_corpus(4, seed=19)
        domain = toy_corpus(4, seed=20)
        target = toy_corpus(6, seed=21)
        cfg = self.small_cfg(8)
        net1, _ = run_setup(Setup.SETUP1, generic, domain, target, cfg, domain_epochs=0)
        net2, _ = run_setup(Setup.SETUP2, generic, domain, target, cfg)
        for name in model.PARAM_ORDER:
            assert np.array_equal(getattr(net1, name), getattr(net2, name))

    def test_provenance_records_stages(self):
        generic = toy_corpus(4, seed=22)
        domain = toy_corpus(4, seed=23)
        target = toy_corpus(6, seed=24)
        _, provenance = run_setup(Setup.SETUP1, generic, domain, target, self.small_cfg())
        names = [s["name"] for s in provenance["stages"]]
        assert names == ["init_random", "generic_pretrain", "domain_pretrain",
                         "target_finetune_early_stop"]
        for stage in provenance["stages"][1:]:
            assert stage["corpus_sha256"]
            assert stage["n_patches"] > 0


class TestClassifyManifest:
    def test_oracle_agreement(self):
        corpus = toy_corpus(3, seed=25)

        class TruthOracle:
            def predict_probs(self, record):
                p = np.zeros(3)
                p[int(record.label) - 1] = 1.0
                return p

        preds = classify_manifest(TruthOracle(), corpus)
        assert len(preds) == len(corpus)
        assert all(p.label == rec.label for p, rec in zip(preds, corpus))

    def test_tie_breaks_to_lowest_index(self):
        class Flat:
            def predict_probs(self, record):
                return np.array([0.4, 0.4, 0.2])

        corpus = toy_corpus(1, seed=26)
        preds = classify_manifest(Flat(), corpus)
        assert all(p.label == T for p in preds)

    def test_mininet_classifier(self):
        corpus = toy_corpus(2, seed=27)
        clf = MiniNetClassifier(MiniNet.init_random(0))
        preds = classify_manifest(clf, corpus)
        assert len(preds) == 6
        for p in preds:
            assert p.probs.sum() == pytest.approx(1.0, abs=1e-9)


class TestExternalClassifier:
    def write(self, tmp_path, rows):
        path = tmp_path / "preds.csv"
        path.write_text("patch_id,p_tumor,p_stroma,p_other\n" +
                        "\n".join(rows) + "\n")
        return path

    def test_lookup(self, tmp_path):
        path = self.write(tmp_path, ["p1,1.0,0.0,0.0", "p2,0.1,0.8,0.1"])
        clf = external_classifier(path)
        rec = LabeledPatch("p1", T, gen_patch(T, seed=0))
        assert np.allclose(clf.predict_probs(rec), [1, 0, 0])

    def test_non_normalized_row(self, tmp_path):
        path = self.write(tmp_path, ["p1,0.5,0.2,0.1"])
        with pytest.raises(NonNormalizedRowError):
            external_classifier(path)

    def test_within_tolerance_renormalized(self, tmp_path):
        path = self.write(tmp_path, [f"p1,{1/3 + 4e-7},{1/3},{1/3 - 8e-7}"])
        clf = external_classifier(path)
        rec = LabeledPatch("p1", T, gen_patch(T, seed=0))
        assert clf.predict_probs(rec).sum() == pytest.approx(1.0, abs=1e-12)

    def test_missing_patch_id(self, tmp_path):
        path = self.write(tmp_path, ["p1,1.0,0.0,0.0"])
        clf = external_classifier(path)
        rec = LabeledPatch("absent", T, gen_patch(T, seed=0))
        with pytest.raises(MissingPatchIdError):
            clf.predict_probs(rec)

    def test_malformed_rows(self, tmp_path):
        for rows in (["p1,0.5,0.5"], ["p1,a,b,c"], ["p1,-0.5,1.0,0.5"],
                     ["p1,1.0,0.0,0.0", "p1,1.0,0.0,0.0"]):
            with pytest.raises(MalformedRowError):
                external_classifier(self.write(tmp_path, rows))

    def test_bad_header(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("id,a,b,c\np1,1,0,0\n")
        with pytest.raises(MalformedRowError):
            external_classifier(path)


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        net = MiniNet.init_random(42)
        path = tmp_path / "net.mnet"
        net.save(path)
        assert path.read_bytes()[:5] == b"MNET1"
        back = MiniNet.load(path)
        for name in model.PARAM_ORDER:
            assert np.array_equal(getattr(back, name), getattr(net, name))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mnet"
        path.write_bytes(b"XXXXX" + b"\x00" * 100)
        with pytest.raises(CheckpointError):
            MiniNet.load(path)

    def test_truncated(self, tmp_path):
        net = MiniNet.init_random(0)
        path = tmp_path / "t.mnet"
        net.save(path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CheckpointError):
            MiniNet.load(path)


class TestEvaluateAccuracy:
    def test_perfect_on_trained(self):
        corpus = toy_corpus(10, seed=28)
        cfg = TrainConfig(learning_rate=0.05, batch_size=10, epochs_max=30, seed=6)
        net, _ = train(MiniNet.init_random(28), corpus, cfg)
        assert evaluate_accuracy(net, corpus) >= 0.95
