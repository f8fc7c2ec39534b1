import collections
import dataclasses

import numpy as np

from kronadapt.validators import MaxRankValidator

from .base import Adapter, AdapterState

__all__ = ['LoRAAdapterState', 'LoRA']


@dataclasses.dataclass(frozen=True, eq=False, kw_only=True)
class LoRAAdapterState(AdapterState):
    '''
    Low-rank factors of ΔW = scale * (A · B), A d x r, B r x h.
    '''
    A: np.ndarray
    B: np.ndarray

    family = 'lora'
    factor_names = ('A', 'B')

    def __post_init__(self):
        super().__post_init__()
        self._check_shape('A', (self.d, self.r))
        self._check_shape('B', (self.r, self.h))

    @property
    def r(self):
        return self.A.shape[1]


class LoRA(Adapter):
    '''
    Low-rank adapter, one control: the rank r.
    Trainable parameters r*(d + h).
    '''
    class Meta:
        family = 'lora'
        state_class = LoRAAdapterState
        up_factor = 'B'
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
        ])

    def rank_bound(self, spec):
        return spec.rank

    def delta_weight(self, state):
        return state.scale * (state.A @ state.B)

    def delta_matvec(self, state, x):
        if x.ndim == 1:
            return state.scale * (state.A @ (state.B @ x))
        return state.scale * ((x @ state.B.T) @ state.A.T)

    def gradients(self, state, x, upstream):
        x = np.atleast_2d(x)
        g = np.atleast_2d(upstream)
        return collections.OrderedDict([
            ('A', state.scale * (g.T @ (x @ state.B.T))),
            ('B', state.scale * ((g @ state.A).T @ x)),
        ])
