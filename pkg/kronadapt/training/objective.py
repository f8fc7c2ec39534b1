'''
The denoising objective, mean over a batch of

    w_t * || D(z_t | c, t) - eps ||^2

where D is the toy attention block. Each sample is fed as two tokens,
z_t + τ(t) and c + τ(t), τ the sinusoidal timestep embedding; the
output at the z_t token is the noise prediction.
'''
import collections
import dataclasses
import math

import numpy as np

from kronadapt.adapters import get_adapter
from kronadapt.exceptions import DimensionMismatch, InvalidSpec, NonFinite
from kronadapt.utils import pairwise_mean

from .attention import GROUPS, forward_with_cache, timestep_embedding

__all__ = [
    'DenoiseBatch',
    'build_tokens',
    'denoise_predict',
    'denoise_loss',
    'loss_and_gradients',
]


@dataclasses.dataclass(frozen=True, eq=False)
class DenoiseBatch:
    '''
    z_t, eps, c
        batch x dim
    t
        timestep index per sample
    w_t
        positive weight per sample, ones when omitted
    '''
    z_t: np.ndarray
    eps: np.ndarray
    c: np.ndarray
    t: np.ndarray
    w_t: np.ndarray = None

    def __post_init__(self):
        z = np.asarray(self.z_t, dtype=np.float64)
        n = z.shape[0] if z.ndim == 2 else -1
        arrays = {
            'z_t': z,
            'eps': np.asarray(self.eps, dtype=np.float64),
            'c': np.asarray(self.c, dtype=np.float64),
        }
        for name, arr in arrays.items():
            if arr.ndim != 2 or arr.shape != z.shape:
                raise DimensionMismatch(
                    'Batch arrays must share shape batch x dim.',
                    params={name: arr.shape, 'z_t': z.shape}
                )
        t = np.asarray(self.t).reshape(-1)
        w = np.ones(n) if self.w_t is None else np.asarray(self.w_t, dtype=np.float64).reshape(-1)
        if t.shape[0] != n or w.shape[0] != n:
            raise DimensionMismatch(
                'Every per-sample array needs one entry per sample.',
                params={'batch': n, 't': t.shape[0], 'w_t': w.shape[0]}
            )
        if not np.all(w > 0):
            raise InvalidSpec('Sample weights must be positive.', params={'w_t': 'non-positive entry'})
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, 't', t)
        object.__setattr__(self, 'w_t', w)

    def __len__(self):
        return self.z_t.shape[0]

    @property
    def dim(self):
        return self.z_t.shape[1]

    def with_targets(self, eps):
        return dataclasses.replace(self, eps=eps)


def build_tokens(z_t, c, t):
    tau = timestep_embedding(t, z_t.shape[1])
    return np.stack([z_t + tau, c + tau], axis=1)


def _check_dim(model, batch):
    if batch.dim != model.dim:
        raise DimensionMismatch(
            'Batch width must equal the model width.',
            params={'batch': batch.dim, 'dim': model.dim}
        )


def denoise_predict(model, batch):
    '''
    Noise prediction for every sample, batch x dim.
    '''
    _check_dim(model, batch)
    y, _ = forward_with_cache(model, build_tokens(batch.z_t, batch.c, batch.t))
    return y[:, 0, :]


def _per_sample_loss(batch, pred):
    residual = pred - batch.eps
    if not np.all(np.isfinite(residual)):
        raise NonFinite('Forward pass produced non-finite values.')
    return residual, batch.w_t * np.sum(residual * residual, axis=1)


def denoise_loss(model, batch):
    _, per_sample = _per_sample_loss(batch, denoise_predict(model, batch))
    return pairwise_mean(per_sample)


def loss_and_gradients(model, batch):
    '''
    Return (loss, grads) with grads[group][factor] the exact gradient of
    the loss with respect to each adapter factor of the model.
    '''
    _check_dim(model, batch)
    tokens = build_tokens(batch.z_t, batch.c, batch.t)
    y, cache = forward_with_cache(model, tokens)
    residual, per_sample = _per_sample_loss(batch, y[:, 0, :])
    loss = pairwise_mean(per_sample)

    n, count, dim = tokens.shape
    d_y = np.zeros_like(y)
    d_y[:, 0, :] = (2.0 / n) * batch.w_t[:, None] * residual

    p, q, k, v, heads = cache['p'], cache['q'], cache['k'], cache['v'], cache['heads']
    d_heads = d_y @ model.effective_weight('O')
    d_p = np.einsum('ntd,nsd->nts', d_heads, v)
    d_v = np.einsum('nts,ntd->nsd', p, d_heads)
    d_s = p * (d_p - np.sum(d_p * p, axis=-1, keepdims=True))
    d_q = np.einsum('nts,nsd->ntd', d_s, k) / math.sqrt(dim)
    d_k = np.einsum('nts,ntd->nsd', d_s, q) / math.sqrt(dim)

    # (input, upstream) per projection, rows are tokens
    flows = {
        'Q': (tokens, d_q),
        'K': (tokens, d_k),
        'V': (tokens, d_v),
        'O': (heads, d_y),
    }
    grads = collections.OrderedDict()
    for group in GROUPS:
        state = model.adapters.get(group)
        if state is None:
            continue
        x, upstream = flows[group]
        grads[group] = get_adapter(state.family).gradients(
            state,
            x.reshape(n * count, dim),
            upstream.reshape(n * count, dim)
        )
    return loss, grads
