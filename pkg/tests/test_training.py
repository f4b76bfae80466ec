"""Test the training regimes"""

import collections

import numpy as np
import pytest

from bitfault import attack, biterr, evaluate, exceptions, network, optim, quant, training


def sgd(**kwargs):
    options = dict(lr0=0.05, momentum=0.0, weight_decay=0.0, batch_size=50, epochs=1)
    options.update(kwargs)
    return optim.SgdConfig(**options)


def fake_backward(net, losses):
    """Stand-in for network.backward that returns zero gradients and a scripted sequence of losses"""
    values = iter(losses)

    def inner(*args, **kwargs):
        grads = collections.OrderedDict((name, np.zeros(shape, dtype=np.float32)) for name, shape in net.param_index)
        return grads, next(values)
    return inner


class TestClipSpec:
    def test_global_bound(self):
        spec = training.ClipSpec(mode='global', wmax=0.1)
        assert spec.bound('conv1.weight') == 0.1

    def test_no_clipping(self):
        assert training.ClipSpec().bound('anything') is None

    def test_per_layer_bound_has_a_floor(self):
        spec = training.ClipSpec(mode='per-layer', wmax=0.5, kappa={'a': 1.0, 'b': 0.5, 'c': 0.01})
        assert spec.bound('a') == pytest.approx(0.5)
        assert spec.bound('b') == pytest.approx(0.25)
        assert spec.bound('c') == pytest.approx(0.1)

    def test_per_layer_ratio_missing(self):
        spec = training.ClipSpec(mode='per-layer', wmax=0.5, kappa={'a': 1.0})
        with pytest.raises(exceptions.ConfigurationException, match='No per-layer clipping ratio for b'):
            spec.bound('b')

    def test_clipping_needs_positive_wmax(self):
        with pytest.raises(exceptions.ConfigurationException, match='positive wmax'):
            training.ClipSpec(mode='global')

    def test_unknown_mode(self):
        with pytest.raises(exceptions.ConfigurationException, match='mode must be one of'):
            training.ClipSpec(mode='sometimes', wmax=0.1)

    def test_project_in_place(self):
        w = np.array([-0.3, 0.05, 0.2], dtype=np.float32)
        training.ClipSpec(mode='global', wmax=0.1).project({'w': w})
        assert w.tolist() == pytest.approx([-0.1, 0.05, 0.1])

    def test_derive_perlayer_bounds(self, tiny_mlp):
        spec = training.derive_perlayer_bounds(tiny_mlp, wmax=0.2)
        peaks = {name: np.abs(w).max() for name, w in tiny_mlp.parameters().items()}
        widest = max(peaks, key=peaks.get)
        assert spec.mode == 'per-layer'
        assert spec.kappa[widest] == 1.0
        assert all(0 <= k <= 1 for k in spec.kappa.values())
        # Zero-initialized biases fall back to the floor
        assert spec.bound('fc1.bias') == pytest.approx(training.CLIP_FLOOR * 0.2)


class TestTrainConfig:
    def test_unknown_target(self):
        with pytest.raises(exceptions.ConfigurationException, match='Unknown bit error targets: gradients'):
            training.TrainConfig(targets=('weights', 'gradients'))

    def test_bit_error_training_needs_quantization(self):
        with pytest.raises(exceptions.ConfigurationException, match='randbet training needs a quantization'):
            training.TrainConfig(regime='randbet', quant=None)

    def test_rate_range(self):
        with pytest.raises(exceptions.RangeException):
            training.TrainConfig(p=1.5)

    def test_dict_form(self):
        d = training.TrainConfig(regime='randbet', p=0.01).to_dict()
        assert d['regime'] == 'randbet'
        assert d['quant'] == quant.rquant().to_dict()
        assert d['attack']['epsilon'] == 160

    def test_regime_mismatch(self, tiny_mlp, synthetic_train):
        with pytest.raises(exceptions.ConfigurationException, match='Expected a randbet configuration'):
            training.train_randbet(tiny_mlp, synthetic_train, training.TrainConfig(regime='normal'))


class TestGate:
    def test_gate_opens_once_and_stays_open(self, tiny_mlp, synthetic_train, monkeypatch):
        # Clean, clean, perturbed, clean, perturbed
        monkeypatch.setattr(network, 'backward', fake_backward(tiny_mlp, [2.0, 1.0, 5.0, 3.0, 5.0]))
        cfg = training.TrainConfig(regime='randbet', p=0.01, loss_gate=1.75, sgd=sgd(batch_size=10))
        trainer = training.Trainer(tiny_mlp, synthetic_train.subset(30), cfg)
        trainer.run()

        steps = trainer.history.steps
        assert [s['gate'] for s in steps] == [False, True, True]
        assert [s['injected'] for s in steps] == [False, True, True]
        assert [s['perturbed_loss'] for s in steps] == [None, 5.0, 5.0]
        assert trainer.history.gate_step() == 1
        assert trainer.history.epochs[0]['injected_steps'] == 2

    def test_normal_training_never_opens_the_gate(self, tiny_mlp, synthetic_train):
        cfg = training.TrainConfig(regime='normal', loss_gate=1e9, sgd=sgd())
        _, history = training.train(tiny_mlp, synthetic_train.subset(100), cfg)
        assert history.gate_step() is None
        assert not any(s['injected'] for s in history.steps)


class TestEquivalences:
    def test_randbet_without_errors_doubles_the_gradient(self, synthetic_train):
        data = synthetic_train.subset(100)
        a = network.mlp((1, 12, 12), hidden=(16,), seed=0)
        b = network.mlp((1, 12, 12), hidden=(16,), seed=0)
        training.train(a, data, training.TrainConfig(regime='randbet', p=0.0, loss_gate=1e9, sgd=sgd(lr0=0.05)))
        training.train(b, data, training.TrainConfig(regime='normal', sgd=sgd(lr0=0.1)))
        for name, w in a.parameters().items():
            assert np.allclose(w, b.parameters()[name], rtol=1e-6, atol=1e-7), name

    def test_advbet_without_budget_matches_normal_training(self, synthetic_train):
        data = synthetic_train.subset(100)
        a = network.mlp((1, 12, 12), hidden=(16,), seed=0)
        b = network.mlp((1, 12, 12), hidden=(16,), seed=0)
        attack_cfg = attack.AttackConfig(epsilon=0, iterations=1)
        training.train(a, data, training.TrainConfig(regime='advbet', attack=attack_cfg, loss_gate=1e9,
                                                     adv_grad_clip=1e9, sgd=sgd()))
        training.train(b, data, training.TrainConfig(regime='normal', sgd=sgd()))
        for name, w in a.parameters().items():
            assert np.allclose(w, b.parameters()[name], rtol=1e-6, atol=1e-7), name

    def test_advbet_clips_gradients(self, tiny_mlp, synthetic_train):
        attack_cfg = attack.AttackConfig(epsilon=4, iterations=1)
        cfg = training.TrainConfig(regime='advbet', attack=attack_cfg, loss_gate=1e9, adv_grad_clip=1e-3,
                                   sgd=sgd(batch_size=25))
        trainer = training.Trainer(tiny_mlp, synthetic_train.subset(50), cfg)
        trainer.run()
        assert all(s['max_abs_grad'] <= np.float32(1e-3) for s in trainer.history.steps)


class TestTraining:
    def test_clipping_holds_after_every_update(self, tiny_mlp, synthetic_train):
        cfg = training.TrainConfig(regime='randbet', p=0.01, loss_gate=1e9,
                                   clip=training.ClipSpec(mode='global', wmax=0.05), sgd=sgd(epochs=2))
        net, _ = training.train(tiny_mlp, synthetic_train.subset(100), cfg)
        for w in net.parameters().values():
            assert np.abs(w).max() <= np.float32(0.05)

    def test_inputs_and_activations_targets(self, tiny_cnn, synthetic_train):
        cfg = training.TrainConfig(regime='randbet', p=0.01, targets=('weights', 'inputs', 'activations'),
                                   p_inputs=0.05, loss_gate=1e9, sgd=sgd())
        _, history = training.train(tiny_cnn, synthetic_train.subset(50), cfg)
        assert all(s['injected'] for s in history.steps)
        assert all(np.isfinite(s['perturbed_loss']) for s in history.steps)

    def test_fixed_pattern_reuses_one_chip(self, tiny_mlp, synthetic_train):
        cfg = training.TrainConfig(regime='randbet', fixed_pattern=True, sgd=sgd())
        trainer = training.Trainer(tiny_mlp, synthetic_train, cfg)
        first = trainer._chip()
        trainer.state.step = 7
        assert trainer._chip() == first

        trainer.cfg = training.TrainConfig(regime='randbet', fixed_pattern=False, sgd=sgd())
        assert trainer._chip() != first

    def test_history_is_reproducible(self, synthetic_train, tmpdir):
        paths = []
        for run in range(2):
            net = network.mlp((1, 12, 12), hidden=(16,), seed=0)
            cfg = training.TrainConfig(regime='randbet', p=0.01, loss_gate=1e9, seed=3, sgd=sgd(epochs=2))
            _, history = training.train(net, synthetic_train.subset(100), cfg)
            path = str(tmpdir.join('history{}.csv'.format(run)))
            history.to_csv(path)
            paths.append(path)

        with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
            first = a.read()
            assert first == b.read()
        assert first.decode('utf8').splitlines()[0] == 'epoch,clean_loss,perturbed_loss,lr,gate,injected_steps'

    def test_empty_data(self, tiny_mlp):
        with pytest.raises(exceptions.ConfigurationException, match='Training data is empty'):
            training.Trainer(tiny_mlp, (np.zeros((0, 1, 12, 12)), np.zeros(0)), training.TrainConfig())

    def test_divergence_stops_training(self, tiny_mlp, synthetic_train, monkeypatch):
        monkeypatch.setattr(network, 'backward', fake_backward(tiny_mlp, [1.0] + [20.0] * 10))
        cfg = training.TrainConfig(regime='normal', sgd=sgd(batch_size=100, epochs=6))
        with pytest.raises(exceptions.TrainingDivergedException, match='stayed above') as e:
            training.train(tiny_mlp, synthetic_train.subset(100), cfg)
        assert e.value.losses == [1.0, 20.0, 20.0, 20.0]
        assert e.value.layer == 'loss'


def capture_updates(monkeypatch):
    """Replace the optimizer step with one that records the gradients it was given"""
    captured = collections.OrderedDict()

    def record(net, grads, *args, **kwargs):
        captured.update(grads)
    monkeypatch.setattr(optim, 'sgd_step', record)
    return captured


class TestGradients:
    def test_default_scheme(self):
        assert training.TrainConfig().quant == quant.rquant()

    def test_randbet_adds_the_gradient_under_a_frozen_pattern(self, tiny_mlp, synthetic_train, monkeypatch):
        captured = capture_updates(monkeypatch)
        cfg = training.TrainConfig(regime='randbet', p=0.05, fixed_pattern=True, loss_gate=1e9, sgd=sgd())
        trainer = training.Trainer(tiny_mlp, synthetic_train, cfg)
        x, y = synthetic_train.subset(40).arrays()
        record = trainer.step(x, y)
        assert record['injected']

        q = quant.quantize(tiny_mlp.parameters(), cfg.quant)
        clean, _ = network.backward(tiny_mlp, x, y, param_override=quant.dequantize(q))
        perturbed_q = biterr.inject_random(q, trainer._fixed_chip, cfg.p)
        assert perturbed_q != q
        perturbed, loss = network.backward(tiny_mlp, x, y, param_override=quant.dequantize(perturbed_q))
        assert record['perturbed_loss'] == loss
        assert any(not np.allclose(clean[k], perturbed[k]) for k in clean)
        for name, g in captured.items():
            assert np.allclose(g, clean[name] + perturbed[name], rtol=1e-6, atol=1e-8), name

    def test_on_grid_weights_get_float_gradients(self, tiny_mlp, synthetic_train, monkeypatch):
        params = tiny_mlp.parameters()
        for name, w in quant.fake_quantize(params, quant.rquant(8)).items():
            params[name][...] = w
        captured = capture_updates(monkeypatch)
        x, y = synthetic_train.subset(40).arrays()
        training.Trainer(tiny_mlp, synthetic_train, training.TrainConfig(regime='normal', sgd=sgd())).step(x, y)

        expected, _ = network.backward(tiny_mlp, x, y)
        for name, g in captured.items():
            assert np.allclose(g, expected[name], rtol=1e-5, atol=1e-7), name


class TestLabelSmoothing:
    def test_smoothing_lowers_clean_confidence(self, synthetic_train, synthetic_test):
        confidence = {}
        for smoothing in (0.0, 0.3):
            net = network.mlp((1, 12, 12), hidden=(16,), seed=0)
            cfg = training.TrainConfig(regime='normal', label_smoothing=smoothing, sgd=sgd(lr0=0.1, epochs=10))
            training.train(net, synthetic_train, cfg)
            q = quant.quantize(net.parameters(), cfg.quant)
            confidence[smoothing] = evaluate.confidence_stats(net, q, synthetic_test)['mean']
        assert confidence[0.3] < confidence[0.0]
