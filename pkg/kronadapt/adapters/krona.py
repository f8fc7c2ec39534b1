import collections
import dataclasses

import numpy as np

from kronadapt.exceptions import DimensionMismatch, InvalidSpec
from kronadapt.kron_core import kron_materialize, kron_matvec
from kronadapt.validators import DivisorValidator

from .base import Adapter, AdapterState

__all__ = ['KronAdapterState', 'KronA']


@dataclasses.dataclass(frozen=True, eq=False, kw_only=True)
class KronAdapterState(AdapterState):
    '''
    Kronecker factors of ΔW = scale * (A ⊗ B).
    A is a1 x a2, B is b1 x b2, with a1*b1 = d and a2*b2 = h.
    '''
    A: np.ndarray
    B: np.ndarray

    family = 'krona'
    factor_names = ('A', 'B')

    def __post_init__(self):
        super().__post_init__()
        if self.a1 * self.b1 != self.d or self.a2 * self.b2 != self.h:
            raise DimensionMismatch(
                'Factor shapes must multiply to d x h.',
                params={'A': self.A.shape, 'B': self.B.shape, 'layer': (self.d, self.h)}
            )

    @property
    def a1(self):
        return self.A.shape[0]

    @property
    def a2(self):
        return self.A.shape[1]

    @property
    def b1(self):
        return self.B.shape[0]

    @property
    def b2(self):
        return self.B.shape[1]


class KronA(Adapter):
    '''
    Kronecker adapter. Two shape controls, a1 and a2, fix both factors.
    Trainable parameters a1*a2 + (d/a1)*(h/a2).
    '''
    class Meta:
        family = 'krona'
        state_class = KronAdapterState
        up_factor = 'B'
        shape_fields = ('a1', 'a2', 'b1', 'b2')

    def clean(self, spec):
        spec = super().clean(spec)
        if spec.a1 is None or spec.a2 is None:
            raise InvalidSpec(
                'krona needs a1 and a2.',
                params={'a1': spec.a1, 'a2': spec.a2}
            )
        DivisorValidator(spec.d, field='a1')(spec.a1)
        DivisorValidator(spec.h, field='a2')(spec.a2)
        return spec

    def factor_shapes(self, spec):
        return collections.OrderedDict([
            ('A', (spec.a1, spec.a2)),
            ('B', (spec.d // spec.a1, spec.h // spec.a2)),
        ])

    def rank_bound(self, spec):
        b1, b2 = spec.d // spec.a1, spec.h // spec.a2
        return min(spec.a1, spec.a2) * min(b1, b2)

    def delta_weight(self, state):
        return state.scale * kron_materialize(state.A, state.B)

    def delta_matvec(self, state, x):
        if x.ndim == 1:
            return state.scale * kron_matvec(state.A, state.B, x)
        return state.scale * kron_matvec(state.A, state.B, x.T).T

    def gradients(self, state, x, upstream):
        x = np.atleast_2d(x)
        g = np.atleast_2d(upstream)
        # Row-major reshape: g.reshape(n, a1, b1)[m] is the transpose
        # of unvec(g_m, b1, a1), likewise for x.
        gm = g.reshape(-1, state.a1, state.b1)
        xm = x.reshape(-1, state.a2, state.b2)
        grad_a = np.einsum('nik,kl,njl->ij', gm, state.B, xm, optimize=True)
        grad_b = np.einsum('nik,ij,njl->kl', gm, state.A, xm, optimize=True)
        return collections.OrderedDict([
            ('A', state.scale * grad_a),
            ('B', state.scale * grad_b),
        ])
