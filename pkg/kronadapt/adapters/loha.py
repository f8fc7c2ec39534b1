import collections
import dataclasses

import numpy as np

from kronadapt.validators import MaxRankValidator

from .base import Adapter, AdapterState

__all__ = ['LoHAAdapterState', 'LoHA']


@dataclasses.dataclass(frozen=True, eq=False, kw_only=True)
class LoHAAdapterState(AdapterState):
    '''
    ΔW = scale * ((A · B) ⊙ (C · D)), A and C d x r, B and D r x h.
    '''
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    family = 'loha'
    factor_names = ('A', 'B', 'C', 'D')

    def __post_init__(self):
        super().__post_init__()
        r = self.A.shape[1]
        self._check_shape('A', (self.d, r))
        self._check_shape('B', (r, self.h))
        self._check_shape('C', (self.d, r))
        self._check_shape('D', (r, self.h))

    @property
    def r(self):
        return self.A.shape[1]


class LoHA(Adapter):
    '''
    Hadamard product of two low-rank products. No Kronecker structure,
    so ΔW is materialized for every product.
    '''
    class Meta:
        family = 'loha'
        state_class = LoHAAdapterState
        # zeroing D zeroes the whole Hadamard product
        up_factor = 'D'
        shape_fields = ('r',)
        default_rank = 4

    def clean(self, spec):
        spec = super().clean(spec)
        if spec.rank is None:
            spec = dataclasses.replace(spec, rank=min(self.meta.default_rank, spec.d, spec.h))
        MaxRankValidator(min(spec.d, spec.h), field='rank')(spec.rank)
        return spec

    def factor_shapes(self, spec):
        return collections.OrderedDict([
            ('A', (spec.d, spec.rank)),
            ('B', (spec.rank, spec.h)),
            ('C', (spec.d, spec.rank)),
            ('D', (spec.rank, spec.h)),
        ])

    def rank_bound(self, spec):
        return min(spec.rank * spec.rank, spec.d, spec.h)

    def delta_weight(self, state):
        return state.scale * ((state.A @ state.B) * (state.C @ state.D))

    def gradients(self, state, x, upstream):
        x = np.atleast_2d(x)
        g = np.atleast_2d(upstream)
        outer = g.T @ x
        left = state.A @ state.B
        right = state.C @ state.D
        grad_left = state.scale * outer * right
        grad_right = state.scale * outer * left
        return collections.OrderedDict([
            ('A', grad_left @ state.B.T),
            ('B', state.A.T @ grad_left),
            ('C', grad_right @ state.D.T),
            ('D', state.C.T @ grad_right),
        ])
