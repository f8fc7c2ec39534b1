import base64
import binascii
import os

import numpy as np

from kronadapt.exceptions import DimensionMismatch, InvalidSpec, ParseError
from kronadapt.validators import validate_finite

DEFAULT_ELEMENT_BUDGET = 2 ** 26
ELEMENT_BUDGET_ENV = 'KRONADAPT_ELEMENT_BUDGET'


def element_budget():
    '''
    Return the materialization budget, in elements.
    The env var KRONADAPT_ELEMENT_BUDGET overrides the default of 2^26.
    '''
    raw = os.environ.get(ELEMENT_BUDGET_ENV)
    if raw is None or raw.strip() == '':
        return DEFAULT_ELEMENT_BUDGET
    try:
        budget = int(raw)
    except ValueError:
        raise InvalidSpec(
            'Element budget must be an integer.',
            params={ELEMENT_BUDGET_ENV: raw}
        )
    if budget < 1:
        raise InvalidSpec(
            'Element budget must be positive.',
            params={ELEMENT_BUDGET_ENV: raw}
        )
    return budget


def as_matrix(value, field='matrix'):
    '''
    Coerce to a finite float64 2-D array.
    '''
    m = np.asarray(value, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionMismatch(
            'Expected a non-empty matrix.',
            params={field: m.shape}
        )
    return validate_finite(m, field=field)


def as_vector(value, field='vector'):
    '''
    Coerce to a finite float64 1-D array.
    '''
    v = np.asarray(value, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 1:
        raise DimensionMismatch(
            'Expected a non-empty vector.',
            params={field: v.shape}
        )
    return validate_finite(v, field=field)


def pairwise_sum(values):
    '''
    Sum a 1-D sequence by adding neighbours level by level.
    The reduction tree depends only on the length, so the result is
    bit-reproducible however the values were produced.
    '''
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.shape[0] == 0:
        return 0.0
    while v.shape[0] > 1:
        if v.shape[0] % 2:
            v = np.append(v[:-1:2] + v[1::2], v[-1])
        else:
            v = v[0::2] + v[1::2]
    return float(v[0])


def pairwise_mean(values):
    v = np.asarray(values, dtype=np.float64).ravel()
    return pairwise_sum(v) / v.shape[0]


# helpers for checkpoint payloads
def encode_array(arr):
    '''
    Return a JSON-serialisable dict for a float64 matrix: its shape and
    the base64 of the little-endian, column-major payload.
    '''
    arr = np.asarray(arr, dtype=np.float64)
    payload = np.asfortranarray(arr).astype('<f8', copy=False).tobytes(order='F')
    return {
        'shape': list(arr.shape),
        'data': base64.b64encode(payload).decode('ascii'),
    }


def decode_array(value, field='array'):
    '''
    Reverse of encode_array(). Raises ParseError on a malformed entry,
    including a payload whose length disagrees with the shape.
    '''
    try:
        shape = tuple(int(s) for s in value['shape'])
        raw = base64.b64decode(value['data'], validate=True)
    except (KeyError, TypeError, ValueError, binascii.Error) as e:
        raise ParseError('Malformed array entry.', params={'field': field, 'reason': str(e)})
    expected = 8 * int(np.prod(shape))
    if len(shape) != 2 or len(raw) != expected:
        raise ParseError(
            'Array payload length does not match its shape.',
            params={'field': field, 'shape': shape, 'bytes': len(raw)}
        )
    flat = np.frombuffer(raw, dtype='<f8').astype(np.float64)
    return flat.reshape(shape, order='F').copy()
