"""Test the SGD update and learning rate schedule"""

import collections

import numpy as np
import pytest

from bitfault import exceptions, optim, training


class OneTensor:
    """Minimal stand-in for a network: a single stored parameter"""
    def __init__(self, values):
        self.params = collections.OrderedDict(w=np.array(values, dtype=np.float64))

    def parameters(self):
        return self.params


class TestSchedule:
    def test_step_decay_at_milestones(self):
        cfg = optim.SgdConfig(lr0=0.1, epochs=10, milestones=(0.4, 0.6, 0.8))
        rates = [optim.learning_rate(cfg, epoch) for epoch in range(10)]
        assert rates[:4] == [0.1] * 4
        assert rates[4] == pytest.approx(0.01)
        assert rates[6] == pytest.approx(0.001)
        assert rates[9] == pytest.approx(0.0001)

    def test_config_validation(self):
        with pytest.raises(exceptions.ConfigurationException, match='lr0 must be positive'):
            optim.SgdConfig(lr0=0)
        with pytest.raises(exceptions.ConfigurationException, match='momentum'):
            optim.SgdConfig(momentum=1.0)
        with pytest.raises(exceptions.ConfigurationException, match='weight_decay'):
            optim.SgdConfig(weight_decay=-1)


class TestStep:
    def test_plain_update(self):
        net = OneTensor([1.0, -2.0])
        cfg = optim.SgdConfig(lr0=0.5, momentum=0.0, weight_decay=0.0)
        state = optim.sgd_step(net, {'w': np.array([1.0, 1.0])}, optim.SgdState(), cfg)
        assert net.params['w'].tolist() == [0.5, -2.5]
        assert state.step == 1

    def test_momentum_and_weight_decay(self):
        net = OneTensor([1.0])
        cfg = optim.SgdConfig(lr0=0.1, momentum=0.9, weight_decay=0.5)
        state = optim.SgdState()
        # g' = 1 + 0.5 * 1 = 1.5; v = 1.5; w = 1 - 0.15
        optim.sgd_step(net, {'w': np.array([1.0])}, state, cfg)
        assert net.params['w'][0] == pytest.approx(0.85)
        # g' = 1 + 0.425; v = 0.9 * 1.5 + 1.425 = 2.775; w = 0.85 - 0.2775
        optim.sgd_step(net, {'w': np.array([1.0])}, state, cfg)
        assert net.params['w'][0] == pytest.approx(0.5725)
        assert state.velocity['w'][0] == pytest.approx(2.775)

    def test_clipping_is_applied_after_the_update(self):
        net = OneTensor([0.09, -0.09])
        cfg = optim.SgdConfig(lr0=1.0, momentum=0.0, weight_decay=0.0)
        optim.sgd_step(net, {'w': np.array([-0.5, 0.5])}, optim.SgdState(), cfg,
                       clip_spec=training.ClipSpec(mode='global', wmax=0.1))
        assert net.params['w'].tolist() == [0.1, -0.1]

    def test_missing_gradient(self):
        with pytest.raises(exceptions.ShapeException, match="missing: \\['w'\\]"):
            optim.sgd_step(OneTensor([1.0]), {}, optim.SgdState(), optim.SgdConfig())

    def test_gradient_shape_mismatch(self):
        with pytest.raises(exceptions.ShapeException, match='Gradient for w has shape'):
            optim.sgd_step(OneTensor([1.0, 2.0]), {'w': np.zeros(3)}, optim.SgdState(), optim.SgdConfig())
