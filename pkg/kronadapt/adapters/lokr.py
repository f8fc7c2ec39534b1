import collections
import dataclasses
from typing import Optional

import numpy as np

from kronadapt.exceptions import DimensionMismatch, InvalidSpec
from kronadapt.kron_core import kron_materialize, kron_matvec
from kronadapt.validators import MaxRankValidator

from .base import Adapter, AdapterState
from .factorization import lokr_factorization

__all__ = ['LoKrAdapterState', 'LoKr']


@dataclasses.dataclass(frozen=True, eq=False, kw_only=True)
class LoKrAdapterState(AdapterState):
    '''
    ΔW = scale * (L ⊗ (B · C)), or scale * (L ⊗ B) when C is None.
    L is A, or A1 · A2 when the first block is decomposed too.
    '''
    A: Optional[np.ndarray] = None
    A1: Optional[np.ndarray] = None
    A2: Optional[np.ndarray] = None
    B: np.ndarray
    C: Optional[np.ndarray] = None

    family = 'lokr'
    factor_names = ('A', 'A1', 'A2', 'B', 'C')

    def __post_init__(self):
        super().__post_init__()
        present = tuple(getattr(self, name) is not None for name in ('A', 'A1', 'A2'))
        if present not in ((True, False, False), (False, True, True)):
            raise DimensionMismatch(
                'The first block is either A or the pair A1, A2.',
                params={'present': [n for n, p in zip(('A', 'A1', 'A2'), present) if p]}
            )
        if self.A is None and self.A1.shape[1] != self.A2.shape[0]:
            raise DimensionMismatch(
                'Inner factors do not chain.',
                params={'A1': self.A1.shape, 'A2': self.A2.shape}
            )
        if self.C is not None and self.B.shape[1] != self.C.shape[0]:
            raise DimensionMismatch(
                'Inner factors do not chain.',
                params={'B': self.B.shape, 'C': self.C.shape}
            )
        left_rows, left_cols = self.left_shape
        rows, cols = self.block_shape
        if left_rows * rows != self.d or left_cols * cols != self.h:
            raise DimensionMismatch(
                'Factor shapes must multiply to d x h.',
                params={'left': (left_rows, left_cols), 'block': (rows, cols), 'layer': (self.d, self.h)}
            )

    @property
    def decomposed(self):
        return self.C is not None

    @property
    def left_decomposed(self):
        return self.A is None

    @property
    def left_shape(self):
        if self.A is not None:
            return self.A.shape
        return (self.A1.shape[0], self.A2.shape[1])

    @property
    def block_shape(self):
        if self.C is None:
            return self.B.shape
        return (self.B.shape[0], self.C.shape[1])

    @property
    def r(self):
        return self.B.shape[1] if self.C is not None else None

    @property
    def left_r(self):
        return self.A1.shape[1] if self.A is None else None

    def left(self):
        if self.A is not None:
            return self.A
        return self.A1 @ self.A2

    def block(self):
        if self.C is None:
            return self.B
        return self.B @ self.C


class LoKr(Adapter):
    '''
    Kronecker product with a low-rank second block.
    Factor shapes come from lokr_factorization() applied to d and h
    independently: A takes the smaller parts, the block the larger.
    With decompose_second=False the block is one full matrix B. With
    decompose_both the first block is low rank as well, A1 · A2, of the
    same rank as B · C.
    '''
    class Meta:
        family = 'lokr'
        state_class = LoKrAdapterState
        shape_fields = ('r', 'left_r')
        default_rank = 8

    def clean(self, spec):
        spec = super().clean(spec)
        if spec.factor != -1 and spec.factor < 1:
            raise InvalidSpec(
                'factor must be -1 or positive.',
                params={'factor': spec.factor}
            )
        if spec.decompose_both and not spec.decompose_second:
            raise InvalidSpec(
                'decompose_both needs decompose_second.',
                params={'decompose_both': True, 'decompose_second': False}
            )
        if spec.decompose_second:
            (m_d, n_d), (m_h, n_h) = self.split(spec)
            limit = min(n_d, n_h)
            if spec.decompose_both:
                limit = min(limit, m_d, m_h)
            if spec.rank is None:
                spec = dataclasses.replace(spec, rank=min(self.meta.default_rank, limit))
            MaxRankValidator(limit, field='rank')(spec.rank)
        return spec

    def split(self, spec):
        return lokr_factorization(spec.d, spec.factor), lokr_factorization(spec.h, spec.factor)

    def up_factor(self, spec):
        return 'C' if spec.decompose_second else 'B'

    def state_up_factor(self, state):
        return 'C' if state.decomposed else 'B'

    def factor_shapes(self, spec):
        (m_d, n_d), (m_h, n_h) = self.split(spec)
        shapes = collections.OrderedDict()
        if spec.decompose_both:
            shapes['A1'] = (m_d, spec.rank)
            shapes['A2'] = (spec.rank, m_h)
        else:
            shapes['A'] = (m_d, m_h)
        if spec.decompose_second:
            shapes['B'] = (n_d, spec.rank)
            shapes['C'] = (spec.rank, n_h)
        else:
            shapes['B'] = (n_d, n_h)
        return shapes

    def rank_bound(self, spec):
        (m_d, n_d), (m_h, n_h) = self.split(spec)
        left = spec.rank if spec.decompose_both else min(m_d, m_h)
        inner = spec.rank if spec.decompose_second else min(n_d, n_h)
        return left * inner

    def delta_weight(self, state):
        return state.scale * kron_materialize(state.left(), state.block())

    def delta_matvec(self, state, x):
        left = state.left()
        block = state.block()
        if x.ndim == 1:
            return state.scale * kron_matvec(left, block, x)
        return state.scale * kron_matvec(left, block, x.T).T

    def gradients(self, state, x, upstream):
        x = np.atleast_2d(x)
        g = np.atleast_2d(upstream)
        left = state.left()
        block = state.block()
        rows, cols = block.shape
        gm = g.reshape(-1, left.shape[0], rows)
        xm = x.reshape(-1, left.shape[1], cols)
        grad_left = state.scale * np.einsum('nik,kl,njl->ij', gm, block, xm, optimize=True)
        grad_block = state.scale * np.einsum('nik,ij,njl->kl', gm, left, xm, optimize=True)
        grads = collections.OrderedDict()
        if state.A is not None:
            grads['A'] = grad_left
        else:
            grads['A1'] = grad_left @ state.A2.T
            grads['A2'] = state.A1.T @ grad_left
        if state.C is None:
            grads['B'] = grad_block
        else:
            grads['B'] = grad_block @ state.C.T
            grads['C'] = state.B.T @ grad_block
        return grads
