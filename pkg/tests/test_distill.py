import math

import numpy as np
import pytest
from gradcheck import LOSS_SPECS, max_relative_error, probe_batch, probe_net

from twinlab.distill import (
    Activation,
    Conv1D,
    Dataset,
    Dense,
    DistillConfig,
    Example1D,
    Flatten,
    GeneratorConfig,
    LossSpec,
    MicroNet,
    PgdConfig,
    Schedule,
    ShapeError,
    StudyConfig,
    conv_net,
    cross_entropy,
    evaluate,
    generate_dataset,
    gradients,
    loss_weights,
    nearest_template,
    pgd_attack,
    rsa_loss,
    run_distillation_study,
    similarity,
    train,
)
from twinlab.distill.study import CSV_HEADER

FAST = Schedule(epoch_size=200, batch_size=50)


class TestData:
    def test_balanced(self):
        d = generate_dataset(103, 0)
        counts = np.bincount(d.y, minlength=10)
        assert counts.max() - counts.min() <= 1 and d.x.shape == (103, 40)

    def test_deterministic(self):
        assert generate_dataset(50, 3).tobytes() == generate_dataset(50, 3).tobytes()
        assert generate_dataset(50, 3).tobytes() != generate_dataset(50, 4).tobytes()

    def test_noise_free_is_template_separable(self):
        cfg = GeneratorConfig(noise_sd=0.0)
        d = generate_dataset(500, 1, cfg)
        assert np.mean(nearest_template(d.x, cfg) == d.y) == 1.0

    def test_example_validation(self):
        with pytest.raises(ValueError):
            Example1D(np.zeros(39), 1)
        with pytest.raises(ValueError):
            Example1D(np.zeros(40), 10)

    def test_examples_view(self):
        ex = generate_dataset(5, 0).examples()
        assert len(ex) == 5 and ex[0].signal.shape == (40,)


class TestNet:
    def test_zero_params_uniform(self):
        net = conv_net()
        net.params[:] = 0
        logits, _ = net.forward(generate_dataset(8, 0).x)
        assert np.all(logits == 0)
        assert abs(cross_entropy(logits, np.zeros(8, int))[0] - math.log(10)) < 1e-12

    def test_dense_matches_matmul(self):
        net = MicroNet([Flatten(), Dense(40, 10)], rng_seed=2)
        W, b = net.layer_params(1)
        x = np.random.default_rng(0).standard_normal((7, 40))
        assert np.allclose(net.forward(x)[0], x @ W.T + b, atol=1e-12)

    def test_conv_matches_loop(self):
        layer = Conv1D(2, 3, 5, stride=2, padding=2)
        net = MicroNet([layer], input_shape=(2, 11), rng_seed=1)
        W, b = net.layer_params(0)
        x = np.random.default_rng(0).standard_normal((4, 2, 11))
        xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
        L = (11 + 4 - 5) // 2 + 1
        ref = np.zeros((4, 3, L))
        for n in range(4):
            for o in range(3):
                for t in range(L):
                    ref[n, o, t] = np.sum(W[o] * xp[n, :, 2 * t : 2 * t + 5]) + b[o]
        assert np.allclose(net.forward(x)[0], ref, atol=1e-12)

    def test_batch_permutation(self):
        net = conv_net(rng_seed=1)
        x = generate_dataset(20, 0).x
        perm = np.random.default_rng(0).permutation(20)
        assert np.allclose(net.forward(x)[0][perm], net.forward(x[perm])[0], atol=1e-12)

    def test_default_size(self):
        assert conv_net().n_params == 3498

    def test_shape_error_names_layer(self):
        with pytest.raises(ShapeError, match="layer 2"):
            MicroNet([Conv1D(1, 4, 5), Flatten(), Dense(10, 10)])

    def test_save_load(self, tmp_path):
        net = conv_net(rng_seed=4)
        net.save(tmp_path / "n.bin")
        back = MicroNet.load(tmp_path / "n.bin")
        x = generate_dataset(10, 0).x
        assert np.array_equal(back.params, net.params)
        assert np.array_equal(back.forward(x)[0], net.forward(x)[0])
        assert (tmp_path / "n.bin").stat().st_size == 8 * net.n_params


class TestGradients:
    @pytest.mark.parametrize("name", sorted(LOSS_SPECS))
    def test_finite_differences(self, name):
        net = probe_net()
        assert net.n_params <= 500
        x, y, t = probe_batch(net)
        assert max_relative_error(net, x, y, LOSS_SPECS[name], t) < 1e-4

    def test_input_gradient(self):
        net = probe_net(1)
        x, y, _ = probe_batch(net, 1, 3)
        _, _, dx = gradients(net, x, y, input_grad=True)
        h = 1e-5
        for idx in [(0, 0), (1, 17), (2, 39)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = (gradients(net, xp, y)[0] - gradients(net, xm, y)[0]) / (2 * h)
            assert abs(num - dx[idx]) <= 1e-6 * max(1.0, abs(num))

    def test_linear_in_weights(self):
        net = probe_net()
        x, y, t = probe_batch(net)
        g_ce = gradients(net, x, y, LossSpec(1.0, 0.0))[1]
        g_rsa = gradients(net, x, y, LossSpec(0.0, 1.0), t)[1]
        g = gradients(net, x, y, LossSpec(0.4, 2.5), t)[1]
        assert np.allclose(g, 0.4 * g_ce + 2.5 * g_rsa, atol=1e-12)

    def test_layers_past_tap_get_no_rsa_gradient(self):
        net = probe_net()
        x, y, t = probe_batch(net)
        g = gradients(net, x, y, LossSpec(0.0, 1.0, taps=(0,)), t[:1])[1]
        assert np.all(g[net.layer_slice(2)] == 0) and np.all(g[net.layer_slice(5)] == 0)
        assert np.any(g[net.layer_slice(0)] != 0)


class TestRsa:
    def test_identity_zero(self):
        a = np.random.default_rng(0).standard_normal((8, 5))
        loss, grads = rsa_loss([a], [a])
        assert loss < 1e-20 and np.allclose(grads[0], 0, atol=1e-10)

    def test_scale_invariant(self):
        rng = np.random.default_rng(0)
        a, t = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
        assert abs(rsa_loss([a], [t])[0] - rsa_loss([7.0 * a], [t])[0]) < 1e-12

    def test_two_sample_hand_value(self):
        # cos(student) = 0, cos(teacher) = 1/sqrt(2); two ordered pairs over B(B-1) = 2
        loss, _ = rsa_loss([np.array([[1.0, 0.0], [0.0, 1.0]])], [np.array([[1.0, 0.0], [1.0, 1.0]])], "cosine")
        assert abs(loss - 0.5) < 1e-10

    def test_similarity_diagonal(self):
        s = similarity(np.random.default_rng(0).standard_normal((6, 4)), "pearson")
        assert np.allclose(np.diag(s), 1.0)

    def test_batch_of_one(self):
        with pytest.raises(ValueError):
            rsa_loss([np.ones((1, 3))], [np.ones((1, 3))])

    @pytest.mark.parametrize("mode,expected", [("additive", (1.0, 4.0)), ("literal", (-3.0, 4.0)),
                                               ("rescaled", (0.2, 0.8))])
    def test_loss_weights(self, mode, expected):
        assert np.allclose(loss_weights(4.0, mode), expected)


class TestPgd:
    def test_zero_epsilon_identity(self):
        net = conv_net()
        d = generate_dataset(10, 0)
        assert np.array_equal(pgd_attack(net, d.x, d.y, PgdConfig(0.0, 5)), d.x)

    def test_feasible(self):
        net = conv_net()
        d = generate_dataset(20, 0)
        xa = pgd_attack(net, d.x, d.y, PgdConfig(0.2, 7))
        assert np.max(np.abs(xa - d.x)) <= 0.2 + 1e-12

    def test_linear_model_reaches_optimum(self):
        # two-class linear model: the worst case is the corner -eps*sign(w_y - w_other)
        net = MicroNet([Flatten(), Dense(40, 2)], rng_seed=3)
        W, b = net.layer_params(1)
        x = np.random.default_rng(0).standard_normal((5, 40))
        y = np.array([0, 1, 0, 1, 1])
        eps = 0.1
        trace = []
        xa = pgd_attack(net, x, y, PgdConfig(eps, 10), trace=trace)
        d = W[y] - W[1 - y]
        assert np.allclose(xa, x - eps * np.sign(d))
        assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(trace, trace[1:]))
        opt = cross_entropy(net.forward(x - eps * np.sign(d))[0], y)[0]
        assert abs(trace[-1] - opt) < 1e-12

    def test_attack_lowers_accuracy(self):
        net = conv_net(rng_seed=1)
        d = generate_dataset(600, 0)
        train(net, d, FAST, DistillConfig(epochs=10), rng_seed=1)
        clean, adv = evaluate(net, generate_dataset(300, 9), PgdConfig(0.3, 10))
        assert adv < clean


class TestTraining:
    def test_deterministic(self):
        d = generate_dataset(100, 0)
        a, _ = train(conv_net(rng_seed=1), d, FAST, DistillConfig(epochs=2), rng_seed=5)
        b, _ = train(conv_net(rng_seed=1), d, FAST, DistillConfig(epochs=2), rng_seed=5)
        assert np.array_equal(a.params, b.params)

    def test_loss_decreases_and_lr_drops(self):
        net, hist = train(conv_net(rng_seed=1), generate_dataset(300, 0), FAST, DistillConfig(epochs=8))
        assert hist.epoch_loss[-1] < hist.epoch_loss[0]
        assert hist.n_steps == 8 * 4
        assert hist.lr[15] == 0.01 and hist.lr[16] == pytest.approx(0.001)

    def test_step_count_independent_of_size(self):
        n1 = train(conv_net(), generate_dataset(30, 0), FAST, DistillConfig(epochs=3))[1].n_steps
        n2 = train(conv_net(), generate_dataset(600, 0), FAST, DistillConfig(epochs=3))[1].n_steps
        assert n1 == n2 == 12

    def test_distinct_examples(self):
        d = generate_dataset(100, 0)
        a, _ = train(conv_net(), d, FAST, DistillConfig(epochs=1, distinct_examples=40))
        b, _ = train(conv_net(), d[:40], FAST, DistillConfig(epochs=1))
        assert np.array_equal(a.params, b.params)
        with pytest.raises(ValueError):
            train(conv_net(), d, FAST, DistillConfig(distinct_examples=101))

    def test_beta_zero_is_teacher_label_training(self):
        teacher = conv_net(rng_seed=9)
        d = generate_dataset(100, 0)
        relabeled = Dataset(d.x, teacher.predict(d.x))
        a, ha = train(conv_net(rng_seed=1), d, FAST, DistillConfig(epochs=2), teacher=teacher)
        b, hb = train(conv_net(rng_seed=1), relabeled, FAST, DistillConfig(epochs=2))
        assert np.array_equal(a.params, b.params) and ha.loss == hb.loss

    def test_zero_epsilon_adversarial_equals_clean(self):
        d = generate_dataset(100, 0)
        a, _ = train(conv_net(rng_seed=1), d, FAST, DistillConfig(epochs=2), adversarial=PgdConfig(0.0, 3))
        b, _ = train(conv_net(rng_seed=1), d, FAST, DistillConfig(epochs=2))
        assert np.array_equal(a.params, b.params)

    def test_rsa_runs_and_reduces_rsa(self):
        teacher = conv_net(rng_seed=9)
        d = generate_dataset(200, 0)
        net0 = conv_net(rng_seed=1)
        _, t_acts = teacher.forward(d.x)
        before = rsa_loss(net0.forward(d.x)[1], t_acts)[0]
        net, _ = train(net0.clone(), d, FAST, DistillConfig(beta=10, mode="rescaled", epochs=5), teacher=teacher)
        after = rsa_loss(net.forward(d.x)[1], t_acts)[0]
        assert after < before

    def test_untrained_is_chance(self):
        net = conv_net()
        net.params[:] = 0
        assert evaluate(net, generate_dataset(1000, 0))[0] == pytest.approx(0.1)

    def test_non_finite_loss_reported(self):
        net = conv_net()
        net.params[:] = 1e300
        with pytest.raises(FloatingPointError, match="step 0"):
            train(net, generate_dataset(50, 0), FAST, DistillConfig(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DistillConfig(beta=-1)
        with pytest.raises(ValueError):
            DistillConfig(kernel="euclid")
        with pytest.raises(ValueError):
            PgdConfig(-0.1)


TINY = StudyConfig(base_examples=40, teacher_examples=200, eval_examples=100, epochs=1, teacher_epochs=1,
                   schedule=FAST, eval_attack=PgdConfig(0.15, 3), n_seeds=2, mode="rescaled")


class TestStudy:
    def test_rows_and_csv(self):
        rep = run_distillation_study((1,), (0, 10), (0.0, 0.1), rng_seed=1, config=TINY)
        # per seed: plain x 2 noise levels, rsa x 2, adversarial x 1
        assert len(rep.rows) == 2 * 5
        lines = rep.to_csv().splitlines()
        assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 11
        plain = rep.select("plain", 1)
        assert plain[0].adv_acc == plain[1].adv_acc and plain[0].noise_frac != plain[1].noise_frac

    def test_deterministic(self):
        a = run_distillation_study((1,), (0, 10), (0.0,), rng_seed=2, config=TINY)
        b = run_distillation_study((1,), (0, 10), (0.0,), rng_seed=2, config=TINY)
        assert a.to_csv() == b.to_csv()

    def test_summary(self):
        rep = run_distillation_study((1,), (0,), (0.0,), rng_seed=1, config=TINY)
        mean, se, n = rep.summary("plain", 1)
        assert n == 2 and 0 <= mean <= 1 and se >= 0

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            run_distillation_study((), (0,), (0.0,), config=TINY)
