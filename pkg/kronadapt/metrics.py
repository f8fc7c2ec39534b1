'''
Alignment scores over embedding vectors supplied from outside.

The image score is the mean cosine similarity over every
(reference, generated) pair; with image-model embeddings it is the
CLIP-I score, with self-supervised ones the DINO score. The text score
pairs generated image i with prompt i.
'''
import dataclasses
import enum

import numpy as np

from kronadapt.exceptions import (
    DimensionMismatch,
    EmptySet,
    InvalidSpec,
    LengthMismatch,
    ZeroNorm,
)
from kronadapt.utils import pairwise_mean
from kronadapt.validators import validate_finite

__all__ = [
    'Role',
    'EmbeddingSet',
    'cosine_sim',
    'image_alignment_score',
    'dino_score',
    'text_alignment_score',
]


class Role(str, enum.Enum):
    REFERENCE_IMAGES = 'reference_images'
    GENERATED_IMAGES = 'generated_images'
    PROMPTS = 'prompts'


@dataclasses.dataclass(frozen=True, eq=False)
class EmbeddingSet:
    '''
    vectors
        count x dim, every row of positive norm
    '''
    label: str
    vectors: np.ndarray
    role: Role

    def __post_init__(self):
        try:
            object.__setattr__(self, 'role', Role(self.role))
        except ValueError:
            raise InvalidSpec('Unknown embedding role.', params={'role': self.role})
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.size == 0:
            raise EmptySet('Embedding set is empty.', params={'label': self.label})
        if vectors.ndim != 2:
            raise DimensionMismatch(
                'Embeddings must share one dimension.',
                params={'label': self.label, 'shape': vectors.shape}
            )
        validate_finite(vectors, field=self.label)
        norms = np.linalg.norm(vectors, axis=1)
        if not np.all(norms > 0):
            raise ZeroNorm(
                'Embedding with zero norm.',
                params={'label': self.label, 'index': int(np.argmin(norms))}
            )
        object.__setattr__(self, 'vectors', vectors)

    @classmethod
    def from_vectors(cls, label, vectors, role):
        '''
        Build from a list of vectors, which may disagree in length.
        '''
        vectors = list(vectors)
        if not vectors:
            raise EmptySet('Embedding set is empty.', params={'label': label})
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise DimensionMismatch(
                'Embeddings must share one dimension.',
                params={'label': label, 'dims': sorted(dims)}
            )
        return cls(label=label, vectors=np.array(vectors, dtype=np.float64), role=role)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def norms(self):
        return np.linalg.norm(self.vectors, axis=1)


def _dots(x, y):
    '''
    Dot products along the last axis. Products and squared norms both
    go through here so they share one summation order; with that,
    sqrt((v·v)(v·v)) == v·v and identical vectors score exactly 1.
    '''
    return np.sum(x * y, axis=-1)


def _cosines(x, y):
    cross = _dots(x, y)
    scale = np.sqrt(_dots(x, x) * _dots(y, y))
    # rounding can step just outside [-1, 1]
    return np.clip(cross / scale, -1.0, 1.0)


def cosine_sim(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionMismatch('Vectors differ in length.', params={'x': x.shape, 'y': y.shape})
    if not (np.any(x) and np.any(y)):
        raise ZeroNorm(
            'Cosine similarity of a zero vector.',
            params={'x': float(np.linalg.norm(x)), 'y': float(np.linalg.norm(y))}
        )
    return float(_cosines(x, y))


def _check_pair(first, second):
    for s in (first, second):
        if len(s) == 0:
            raise EmptySet('Embedding set is empty.', params={'label': s.label})
    if first.dim != second.dim:
        raise DimensionMismatch(
            'Embedding sets differ in dimension.',
            params={first.label: first.dim, second.label: second.dim}
        )


def image_alignment_score(real, gen):
    '''
    Mean cosine similarity over all len(real) x len(gen) pairs.
    '''
    _check_pair(real, gen)
    sims = _cosines(real.vectors[:, None, :], gen.vectors[None, :, :])
    return pairwise_mean(sims)


def dino_score(real, gen):
    return image_alignment_score(real, gen)


def text_alignment_score(gen, prompts):
    '''
    Mean cosine similarity of gen[i] with prompts[i].
    '''
    if len(gen) != len(prompts):
        raise LengthMismatch(
            'Each generated image needs exactly one prompt.',
            params={gen.label: len(gen), prompts.label: len(prompts)}
        )
    _check_pair(gen, prompts)
    return pairwise_mean(_cosines(gen.vectors, prompts.vectors))
