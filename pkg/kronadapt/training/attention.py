import dataclasses
import math

import numpy as np

from kronadapt.adapters import (
    adapter_forward,
    build_adapter,
    merge_adapter,
    module_delta,
)
from kronadapt.exceptions import DimensionMismatch
from kronadapt.utils import as_matrix, as_vector
from kronadapt.validators import validate_finite, validate_seed

__all__ = [
    'GROUPS',
    'ToyAttentionModel',
    'attention_forward',
    'timestep_embedding',
]

GROUPS = ('Q', 'K', 'V', 'O')


@dataclasses.dataclass(eq=False)
class ToyAttentionModel:
    '''
    One single-head attention block, width 'dim'.

    weights, biases
        frozen base parameters per group in GROUPS. Stored read-only.
    adapters
        group -> adapter state. A missing group is a plain affine map.
        Only the training update replaces these.
    '''
    dim: int
    weights: dict
    biases: dict
    adapters: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        weights = {}
        biases = {}
        for group in GROUPS:
            w = as_matrix(self.weights[group], field='W_' + group).copy()
            b = as_vector(self.biases.get(group, np.zeros(self.dim)), field='b_' + group).copy()
            if w.shape != (self.dim, self.dim) or b.shape != (self.dim,):
                raise DimensionMismatch(
                    'Base parameters must be dim x dim and dim.',
                    params={'group': group, 'W': w.shape, 'b': b.shape, 'dim': self.dim}
                )
            w.setflags(write=False)
            b.setflags(write=False)
            weights[group] = w
            biases[group] = b
        self.weights = weights
        self.biases = biases
        unknown = set(self.adapters) - set(GROUPS)
        if unknown:
            raise DimensionMismatch('Unknown adapter groups.', params={'groups': sorted(unknown)})
        self.adapters = dict(self.adapters)

    @classmethod
    def random(cls, dim, template=None, seed=0):
        '''
        Random base weights, N(0, 1/dim), zero biases. With a 'template'
        AdapterSpec, every group gets an adapter seeded from 'seed'.
        '''
        rng = np.random.default_rng(validate_seed(seed))
        weights = {
            group: rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, dim))
            for group in GROUPS
        }
        biases = {group: np.zeros(dim) for group in GROUPS}
        adapters = {}
        if template is not None:
            for i, group in enumerate(GROUPS):
                spec = dataclasses.replace(template.for_layer(dim, dim), seed=(seed + 1 + i) % 2 ** 64)
                adapters[group] = build_adapter(spec)
        return cls(dim=dim, weights=weights, biases=biases, adapters=adapters)

    def with_adapters(self, adapters):
        return ToyAttentionModel(
            dim=self.dim,
            weights=self.weights,
            biases=self.biases,
            adapters=adapters
        )

    def project(self, group, x):
        state = self.adapters.get(group)
        if state is None:
            return x @ self.weights[group].T + self.biases[group]
        return adapter_forward(state, self.weights[group], self.biases[group], x)

    def effective_weight(self, group):
        state = self.adapters.get(group)
        if state is None:
            return self.weights[group]
        return merge_adapter(state, self.weights[group])

    def merged(self):
        '''
        Return an adapter-free model with every ΔW folded into the base.
        '''
        return ToyAttentionModel(
            dim=self.dim,
            weights={group: self.effective_weight(group) for group in GROUPS},
            biases=self.biases,
        )

    def module_deltas(self):
        return {
            group: module_delta(self.weights[group], self.effective_weight(group))
            for group in GROUPS
            if group in self.adapters
        }


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def forward_with_cache(model, x):
    '''
    Forward pass over a batch of token matrices, n x tokens x dim.
    Returns the output and the intermediates backprop needs.
    '''
    n, tokens, dim = x.shape
    flat = x.reshape(n * tokens, dim)
    q = model.project('Q', flat).reshape(n, tokens, dim)
    k = model.project('K', flat).reshape(n, tokens, dim)
    v = model.project('V', flat).reshape(n, tokens, dim)
    p = _softmax(np.einsum('ntd,nsd->nts', q, k) / math.sqrt(dim))
    heads = np.einsum('nts,nsd->ntd', p, v)
    y = model.project('O', heads.reshape(n * tokens, dim)).reshape(n, tokens, dim)
    cache = {'x': x, 'q': q, 'k': k, 'v': v, 'p': p, 'heads': heads}
    return y, cache


def attention_forward(model, x):
    '''
    softmax(Q Kᵀ / sqrt(dim)) V, projected by O, for a tokens x dim
    matrix or a batch n x tokens x dim.
    '''
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-1] != model.dim:
        raise DimensionMismatch(
            'Tokens must have width dim.',
            params={'X': x.shape, 'dim': model.dim}
        )
    validate_finite(x, field='X')
    if x.ndim == 2:
        return forward_with_cache(model, x[None])[0][0]
    return forward_with_cache(model, x)[0]


def timestep_embedding(t, dim):
    '''
    Sinusoidal embedding, frequencies 10000^(-2i/dim); an odd width is
    padded with a zero column.
    '''
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb
