"""Objective math, the shared-trainer loop, logging, checkpoints."""

import numpy as np
import pytest

from projnet.config import RunConfig, format_config, parse_config_text
from projnet.data import synth_blobs
from projnet.errors import (
    ConfigError,
    DataError,
    ModelFormatError,
    TrainingDivergedError,
)
from projnet.nn import Mlp
from projnet.training import (
    CSV_COLUMNS,
    TERMS,
    EvalReport,
    LossParts,
    LossSpec,
    TrainOptions,
    build_model,
    evaluate,
    joint_grads,
    joint_loss,
    load_checkpoint,
    precision_at,
    save_checkpoint,
    train_joint,
    train_many,
    write_manifest,
)


def _logsoftmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _ref_forward(mlp, X):
    a = X
    for i, layer in enumerate(mlp.layers):
        a = a @ layer.W.T + layer.b
        if i < len(mlp.layers) - 1:
            a = np.maximum(a, 0.0)
    return a


def _small_setup(seed=0, n=6):
    rng = np.random.default_rng(seed)
    teacher = Mlp.init([5, 6, 3], seed=seed + 1)
    head = Mlp.init([8, 3], seed=seed + 2)
    X = rng.standard_normal((n, 5))
    A = (rng.random((n, 8)) > 0.5).astype(float)
    labels = rng.integers(0, 3, size=n)
    return teacher, head, X, A, labels


class TestLossSpec:
    def test_mask_validation(self):
        with pytest.raises(ConfigError, match="unknown loss terms"):
            LossSpec(mask=frozenset({"theta", "q"}))

    def test_masked_weights_read_zero(self):
        spec = LossSpec(lambda1=2.0, lambda2=3.0, lambda3=4.0,
                        mask=frozenset({"hat_p"}))
        assert (spec.l1, spec.l2, spec.l3) == (0.0, 0.0, 4.0)
        assert not spec.teacher_in_play

    def test_teacher_in_play(self):
        assert LossSpec().teacher_in_play
        assert LossSpec(lambda1=0.0).teacher_in_play  # imitation still runs
        assert not LossSpec(lambda1=0.0, lambda2=0.0).teacher_in_play
        assert LossSpec(mask=frozenset({"p"})).teacher_in_play

    def test_from_config(self):
        cfg = RunConfig(lambda1=0.5, lambda2=0.2, lambda3=0.9,
                        temperature=2.0)
        spec = LossSpec.from_config(cfg, use_kl=True, couple_teacher=True,
                                    mask={"theta"})
        assert (spec.lambda1, spec.lambda2, spec.lambda3) == (0.5, 0.2, 0.9)
        assert spec.temperature == 2.0
        assert spec.use_kl and spec.couple_teacher
        assert spec.mask == frozenset({"theta"})


class TestJointLoss:
    def test_matches_longhand_formulas(self):
        teacher, head, X, A, labels = _small_setup()
        spec = LossSpec(lambda1=0.7, lambda2=0.3, lambda3=1.1,
                        temperature=2.5)
        parts = joint_loss(teacher, head, X, A, labels, spec)

        zt = _ref_forward(teacher, X)
        zs = _ref_forward(head, A)
        logp_t = _logsoftmax(zt)
        logp_s = _logsoftmax(zs)
        soft = np.exp(_logsoftmax(zt / 2.5))
        rows = np.arange(labels.size)
        theta = -logp_t[rows, labels].mean()
        p = -(soft * logp_s).sum(axis=1).mean()
        hat_p = -logp_s[rows, labels].mean()
        assert parts.theta == pytest.approx(theta, rel=1e-9)
        assert parts.p == pytest.approx(p, rel=1e-9)
        assert parts.hat_p == pytest.approx(hat_p, rel=1e-9)
        assert parts.total == pytest.approx(
            0.7 * theta + 0.3 * p + 1.1 * hat_p, rel=1e-9)

    def test_batch_value_is_mean_of_singles(self):
        teacher, head, X, A, labels = _small_setup(n=5)
        spec = LossSpec()
        whole = joint_loss(teacher, head, X, A, labels, spec)
        singles = [
            joint_loss(teacher, head, X[i:i + 1], A[i:i + 1], labels[i:i + 1],
                       spec).total
            for i in range(5)
        ]
        assert whole.total == pytest.approx(np.mean(singles), rel=1e-9)

    def test_kl_form_subtracts_target_entropy(self):
        teacher, head, X, A, labels = _small_setup()
        ce = joint_loss(teacher, head, X, A, labels, LossSpec())
        kl = joint_loss(teacher, head, X, A, labels, LossSpec(use_kl=True))
        soft = np.exp(_logsoftmax(_ref_forward(teacher, X)))
        entropy = -(soft * np.log(soft)).sum(axis=1).mean()
        assert kl.p == pytest.approx(ce.p - entropy, rel=1e-6)
        assert kl.p >= -1e-9  # KL is non-negative
        assert ce.p >= entropy - 1e-9  # Gibbs bound

    def test_masked_terms_report_zero_and_match_zero_weights(self):
        teacher, head, X, A, labels = _small_setup()
        masked = joint_loss(teacher, head, X, A, labels,
                            LossSpec(mask=frozenset({"hat_p"})))
        assert masked.theta == 0.0 and masked.p == 0.0
        zeroed = joint_loss(teacher, head, X, A, labels,
                            LossSpec(lambda1=0.0, lambda2=0.0))
        assert masked.total == pytest.approx(zeroed.total, rel=1e-12)

    def test_bad_label_names_the_example(self):
        teacher, head, X, A, labels = _small_setup()
        labels = labels.copy()
        labels[3] = 7
        with pytest.raises(DataError, match="label 7 at example 3"):
            joint_loss(teacher, head, X, A, labels, LossSpec())
        with pytest.raises(DataError):
            joint_grads(teacher, head, X, A, labels, LossSpec())


class TestJointGrads:
    def _fd_check(self, spec, seed=0):
        teacher, head, X, A, labels = _small_setup(seed)
        parts, t_grads, h_grads = joint_grads(teacher, head, X, A, labels,
                                              spec)
        pairs = []
        if t_grads is not None:
            pairs += list(zip(teacher.layers, t_grads))
        pairs += list(zip(head.layers, h_grads))
        h = 1e-6
        worst = 0.0
        for layer, (dW, db) in pairs:
            for arr, g in ((layer.W, dW), (layer.b, db)):
                flat, gflat = arr.ravel(), g.ravel()
                for j in range(flat.size):
                    keep = flat[j]
                    flat[j] = keep + h
                    up = joint_loss(teacher, head, X, A, labels, spec).total
                    flat[j] = keep - h
                    down = joint_loss(teacher, head, X, A, labels, spec).total
                    flat[j] = keep
                    num = (up - down) / (2 * h)
                    rel = abs(num - gflat[j]) / max(abs(num), abs(gflat[j]),
                                                    1e-8)
                    worst = max(worst, rel)
        return worst

    def test_stop_gradient_mode(self):
        # soft targets constant: teacher gradient is the label term alone,
        # so only student parameters can be checked against the total
        spec = LossSpec(lambda1=0.8, lambda2=0.4, lambda3=1.2,
                        temperature=1.7)
        teacher, head, X, A, labels = _small_setup()
        _, t_grads, h_grads = joint_grads(teacher, head, X, A, labels, spec)
        theta_only = LossSpec(lambda1=0.8, lambda2=0.0, lambda3=0.0)
        _, t_ref, _ = joint_grads(teacher, head.clone(), X, A, labels,
                                  theta_only)
        for (dW, db), (rW, rb) in zip(t_grads, t_ref):
            assert np.allclose(dW, rW, atol=1e-12)
            assert np.allclose(db, rb, atol=1e-12)

    def test_coupled_gradients_match_finite_differences(self):
        worst = self._fd_check(LossSpec(lambda1=0.9, lambda2=0.5,
                                        lambda3=0.7, temperature=1.5,
                                        couple_teacher=True))
        assert worst < 1e-4

    def test_coupled_kl_gradients_match_finite_differences(self):
        worst = self._fd_check(LossSpec(lambda1=0.6, lambda2=0.8,
                                        lambda3=0.3, temperature=2.0,
                                        use_kl=True, couple_teacher=True))
        assert worst < 1e-4

    def test_student_only_gradients_match_finite_differences(self):
        worst = self._fd_check(LossSpec(lambda1=0.0, lambda2=0.0,
                                        lambda3=1.3))
        assert worst < 1e-4

    def test_masked_imitation_drops_out_of_student_grad(self):
        teacher, head, X, A, labels = _small_setup()
        spec = LossSpec(lambda2=0.5, mask=frozenset({"theta", "hat_p"}))
        _, _, h_grads = joint_grads(teacher, head, X, A, labels, spec)
        plain = LossSpec(lambda2=0.0)
        _, _, h_ref = joint_grads(teacher, head, X, A, labels, plain)
        for (dW, _), (rW, _) in zip(h_grads, h_ref):
            assert np.allclose(dW, rW, atol=1e-12)

    def test_coupling_changes_teacher_grad_only(self):
        teacher, head, X, A, labels = _small_setup()
        free = joint_grads(teacher, head, X, A, labels,
                           LossSpec(lambda2=0.5))
        tied = joint_grads(teacher, head, X, A, labels,
                           LossSpec(lambda2=0.5, couple_teacher=True))
        assert not np.allclose(free[1][0][0], tied[1][0][0])
        for (dW, _), (rW, _) in zip(free[2], tied[2]):
            assert np.allclose(dW, rW, atol=1e-12)


class TestPrecisionAt:
    def test_hand_counted(self):
        probs = np.array([
            [0.5, 0.3, 0.2],   # label 0 -> hit at 1
            [0.2, 0.5, 0.3],   # label 2 -> hit at 2
            [0.6, 0.3, 0.1],   # label 2 -> hit at 3
        ])
        labels = np.array([0, 2, 2])
        pk = precision_at(probs, labels)
        assert pk[1] == pytest.approx(1 / 3)
        assert pk[3] == pytest.approx(1.0)
        assert pk[5] == pytest.approx(1.0)  # k clamps at 3 classes

    def test_ties_resolve_to_lower_class(self):
        probs = np.array([[0.4, 0.4, 0.2]])
        assert precision_at(probs, np.array([0]))[1] == 1.0
        assert precision_at(probs, np.array([1]))[1] == 0.0

    def test_random_probs_score_k_over_c(self):
        rng = np.random.default_rng(0)
        probs = rng.random((4000, 10))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 10, size=4000)
        pk = precision_at(probs, labels)
        assert pk[1] == pytest.approx(0.1, abs=0.02)
        assert pk[5] == pytest.approx(0.5, abs=0.03)


def _blob_cfg(**kw):
    base = dict(input_dim=6, hidden_layers=(16,), num_classes=3, seed=5,
                T=6, d=8, steps=150, batch_size=32, learning_rate=0.1,
                eval_every=50)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def blobs():
    ds = synth_blobs(3, 6, 480, seed=2, separation=6.0)
    return ds.take(np.arange(0, 360)), ds.take(np.arange(360, 480))


class TestTrainMany:
    def test_empty_and_mismatched_configs(self, blobs):
        train, dev = blobs
        with pytest.raises(ConfigError, match="no configurations"):
            train_many([], train)
        with pytest.raises(ConfigError, match="seed"):
            train_many([_blob_cfg(), _blob_cfg(seed=9)], train)
        with pytest.raises(ConfigError, match="lambda1"):
            train_many([_blob_cfg(), _blob_cfg(lambda1=0.5)], train)
        with pytest.raises(ConfigError, match="couple_teacher"):
            train_many([_blob_cfg(), _blob_cfg(T=3)], train,
                       options=TrainOptions(couple_teacher=True))

    def test_solo_and_grouped_runs_are_bit_identical(self, blobs):
        train, dev = blobs
        cfg_a = _blob_cfg(steps=40, eval_every=20)
        cfg_b = _blob_cfg(steps=40, eval_every=20, T=3, d=4,
                          head_hidden_layers=(10,), lambda3=0.5)
        solo = train_joint(cfg_a, train, dev)
        grouped = train_many([cfg_a, cfg_b], train, dev)
        for la, lb in zip(solo.model.head.layers,
                          grouped[0].model.head.layers):
            assert np.array_equal(la.W, lb.W)
            assert np.array_equal(la.b, lb.b)
        for la, lb in zip(solo.model.trainer.layers,
                          grouped[0].model.trainer.layers):
            assert np.array_equal(la.W, lb.W)
        # the second head also matches its own solo run
        solo_b = train_joint(cfg_b, train, dev)
        for la, lb in zip(solo_b.model.head.layers,
                          grouped[1].model.head.layers):
            assert np.array_equal(la.W, lb.W)
        # and both slots expose the same trained trainer object
        assert grouped[1].model.trainer is grouped[0].model.trainer

    def test_zero_steps_leaves_everything_at_init(self, blobs):
        train, _ = blobs
        cfg = _blob_cfg(steps=0)
        result = train_joint(cfg, train)
        fresh = build_model(cfg)
        for got, init in zip(result.model.trainer.layers,
                             fresh.trainer.layers):
            assert np.array_equal(got.W, init.W)
        for got, init in zip(result.model.head.layers, fresh.head.layers):
            assert np.array_equal(got.W, init.W)

    def test_student_only_run_never_touches_trainer(self, blobs):
        train, _ = blobs
        cfg = _blob_cfg(steps=30, lambda1=0.0, lambda2=0.0)
        result = train_joint(cfg, train)
        fresh = build_model(cfg)
        for got, init in zip(result.model.trainer.layers,
                             fresh.trainer.layers):
            assert np.array_equal(got.W, init.W)
        for got, init in zip(result.model.head.layers, fresh.head.layers):
            assert not np.array_equal(got.W, init.W)

    def test_mask_equals_zero_weights_for_the_student(self, blobs):
        train, _ = blobs
        masked = train_joint(_blob_cfg(steps=30), train,
                             options=TrainOptions(
                                 loss_mask=frozenset({"hat_p"})))
        zeroed = train_joint(_blob_cfg(steps=30, lambda1=0.0, lambda2=0.0),
                             train)
        for la, lb in zip(masked.model.head.layers, zeroed.model.head.layers):
            assert np.array_equal(la.W, lb.W)
            assert np.array_equal(la.b, lb.b)

    def test_pretraining_freezes_students(self, blobs):
        train, _ = blobs
        cfg = _blob_cfg(steps=0)
        result = train_joint(cfg, train,
                             options=TrainOptions(pretrain_steps=10))
        fresh = build_model(cfg)
        for got, init in zip(result.model.head.layers, fresh.head.layers):
            assert np.array_equal(got.W, init.W)
        assert not np.array_equal(result.model.trainer.layers[0].W,
                                  fresh.trainer.layers[0].W)

    def test_learns_separable_blobs(self, blobs):
        train, dev = blobs
        result = train_joint(_blob_cfg(steps=500), train, dev)
        assert result.last("projection")["p1"] >= 0.97
        assert result.last("trainer")["p1"] >= 0.97

    def test_eval_schedule(self, blobs):
        train, dev = blobs
        result = train_joint(_blob_cfg(steps=5, eval_every=2), train, dev)
        steps = sorted({row["step"] for row in result.history})
        assert steps == [2, 4, 5]
        with pytest.raises(KeyError):
            result.last("exported")

    def test_divergence_reports_the_step(self, blobs):
        train, _ = blobs
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDivergedError, match="step"):
                train_joint(_blob_cfg(steps=60, learning_rate=1e6), train)

    def test_csv_log_deterministic(self, blobs, tmp_path):
        train, dev = blobs
        cfg = _blob_cfg(steps=40, eval_every=20)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        train_joint(cfg, train, dev, csv_path=p1)
        train_joint(cfg, train, dev, csv_path=p2)
        assert p1.read_text() == p2.read_text()
        lines = p1.read_text().strip().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        # two networks per eval point: 40/20 = 2 points plus the final
        assert len(lines) == 1 + 2 * 2
        first = lines[1].split(",")
        assert first[0] == "20" and first[1] in ("trainer", "projection")

    def test_progress_callback_sees_running_history(self, blobs):
        train, dev = blobs
        seen = []
        train_joint(_blob_cfg(steps=4, eval_every=2), train, dev,
                    progress=lambda step, results: seen.append(step))
        assert seen == [2, 4]


class TestEvaluate:
    def test_reports_both_networks(self, blobs):
        train, dev = blobs
        result = train_joint(_blob_cfg(steps=100), train)
        reports = evaluate(result.model, dev)
        assert set(reports) == {"projection", "trainer"}
        for rep in reports.values():
            assert isinstance(rep, EvalReport)
            assert 0.0 <= rep.p1 <= rep.p3 <= rep.p5 <= 1.0
        assert isinstance(reports["projection"].loss, LossParts)

    def test_student_only_spec_drops_trainer_report(self, blobs):
        train, dev = blobs
        result = train_joint(_blob_cfg(steps=20), train)
        reports = evaluate(result.model, dev,
                           LossSpec(lambda1=0.0, lambda2=0.0))
        assert set(reports) == {"projection"}
        # the trainer never ran, so its pieces report nan, not a value
        assert np.isnan(reports["projection"].loss.theta)
        assert reports["projection"].loss.total == pytest.approx(
            reports["projection"].loss.hat_p)

    def test_matches_final_history_row(self, blobs):
        train, dev = blobs
        cfg = _blob_cfg(steps=40, eval_every=40)
        result = train_joint(cfg, train, dev)
        reports = evaluate(result.model, dev, LossSpec.from_config(cfg))
        assert reports["projection"].p1 == pytest.approx(
            result.last("projection")["p1"], abs=1e-12)
        assert reports["trainer"].p1 == pytest.approx(
            result.last("trainer")["p1"], abs=1e-12)


class TestManifestAndCheckpoint:
    def test_manifest_holds_config_verbatim_plus_comments(self, tmp_path):
        cfg = _blob_cfg(lambda2=0.25)
        path = tmp_path / "manifest.txt"
        write_manifest(path, cfg, TrainOptions(use_kl=True),
                       {"train_rows": 360})
        text = path.read_text()
        assert text.startswith(format_config(cfg))
        assert "# use_kl = True\n" in text
        assert "# couple_teacher = False\n" in text
        assert "# loss_mask = hat_p,p,theta\n" in text
        assert "# train_rows = 360\n" in text
        # comments parse away, so a manifest is a loadable config
        assert parse_config_text(text) == cfg

    def test_checkpoint_roundtrip(self, tmp_path, blobs):
        train, _ = blobs
        cfg = _blob_cfg(steps=25, head_hidden_layers=(12,))
        result = train_joint(cfg, train)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, result.model, cfg)
        model, cfg2 = load_checkpoint(path)
        assert cfg2 == cfg
        for got, want in zip(model.trainer.layers,
                             result.model.trainer.layers):
            assert np.array_equal(got.W, want.W)
            assert np.array_equal(got.b, want.b)
        for got, want in zip(model.head.layers, result.model.head.layers):
            assert np.array_equal(got.W, want.W)

    def test_checkpoint_error_taxonomy(self, tmp_path):
        junk = tmp_path / "junk.npz"
        junk.write_bytes(b"not a zip at all")
        with pytest.raises(ModelFormatError):
            load_checkpoint(junk)

        missing = tmp_path / "missing.npz"
        np.savez(missing, config=format_config(_blob_cfg()))
        with pytest.raises(ModelFormatError, match="missing array"):
            load_checkpoint(missing)

        wrong = tmp_path / "wrong.npz"
        cfg = _blob_cfg()
        model = build_model(cfg)
        arrays = {"config": format_config(cfg)}
        for tag, mlp in (("trainer", model.trainer), ("head", model.head)):
            for i, layer in enumerate(mlp.layers):
                arrays[f"{tag}_W{i}"] = layer.W
                arrays[f"{tag}_b{i}"] = layer.b
        arrays["trainer_W0"] = np.zeros((2, 2))
        np.savez(wrong, **arrays)
        with pytest.raises(ModelFormatError, match="config implies"):
            load_checkpoint(wrong)
