import collections
import enum

import numpy as np

from kronadapt.exceptions import InvalidSpec

__all__ = [
    'OptimizerKind',
    'Optimizer',
    'SGD',
    'Adam',
    'make_optimizer',
]


class OptimizerKind(str, enum.Enum):
    SGD = 'sgd'
    ADAM = 'adam'


class Optimizer:
    '''
    Update rule over a flat mapping of key -> array.
    step() never writes into the arrays it is given; it returns new ones.
    Keys are any hashable, training uses (group, factor) pairs.
    '''
    def __init__(self, learning_rate):
        if not learning_rate > 0:
            raise InvalidSpec('Learning rate must be positive.', params={'learning_rate': learning_rate})
        self.learning_rate = float(learning_rate)

    def step(self, params, grads):
        raise NotImplementedError('%s.step' % self.__class__)


class SGD(Optimizer):
    def step(self, params, grads):
        return collections.OrderedDict(
            (key, value - self.learning_rate * grads[key])
            for key, value in params.items()
        )


class Adam(Optimizer):
    '''
    Adam with bias correction. Moment buffers are created on the first
    step, one per key.
    '''
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(learning_rate)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise InvalidSpec('Betas must lie in [0, 1).', params={'beta1': beta1, 'beta2': beta2})
        if not eps > 0:
            raise InvalidSpec('eps must be positive.', params={'eps': eps})
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        out = collections.OrderedDict()
        for key, value in params.items():
            g = grads[key]
            m = self.m.get(key, np.zeros_like(g))
            v = self.v.get(key, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[key] = m
            self.v[key] = v
            m_hat = m / correction1
            v_hat = v / correction2
            out[key] = value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def make_optimizer(config):
    kind = OptimizerKind(config.optimizer)
    if kind is OptimizerKind.SGD:
        return SGD(config.learning_rate)
    return Adam(
        config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps
    )
