import numbers

import numpy as np

from kronadapt.exceptions import (
    InvalidSpec,
    InvalidFactorization,
    InvalidRank,
    NonFinite,
)

__all__ = [
    'BaseValidator',
    'PositiveIntegerValidator',
    'SeedValidator',
    'FiniteValidator',
    'DivisorValidator',
    'MaxRankValidator',
    'validate_positive_int',
    'validate_seed',
    'validate_finite',
]


class BaseValidator:
    '''
    A callable check on one value.
    Raises 'error_class' with 'message' and 'code' on failure, returns
    nothing on success. 'field' names the value in the error params.
    '''
    message = 'Enter a valid value.'
    code = 'invalid'
    error_class = InvalidSpec

    def __init__(self, field='value', message=None, code=None):
        self.field = field
        if message is not None:
            self.message = message
        if code is not None:
            self.code = code

    def is_valid(self, value):
        raise NotImplementedError('%s.is_valid' % self.__class__)

    def params(self, value):
        return {self.field: value}

    def __call__(self, value):
        if not self.is_valid(value):
            raise self.error_class(self.message, code=self.code, params=self.params(value))


class PositiveIntegerValidator(BaseValidator):
    message = 'Must be a positive integer.'
    code = 'not_positive'

    def is_valid(self, value):
        # bool is an Integral, but never a dimension
        return (
            isinstance(value, numbers.Integral)
            and not isinstance(value, bool)
            and value >= 1
        )


class SeedValidator(BaseValidator):
    '''
    Seeds are unsigned 64-bit integers, the range numpy generators take.
    '''
    message = 'Seed must be an integer in [0, 2**64).'
    code = 'invalid_seed'

    def is_valid(self, value):
        return (
            isinstance(value, numbers.Integral)
            and not isinstance(value, bool)
            and 0 <= value < 2 ** 64
        )


class FiniteValidator(BaseValidator):
    '''
    Reject arrays holding NaN or Inf.
    '''
    message = 'Array holds non-finite entries.'
    code = 'non_finite'
    error_class = NonFinite

    def is_valid(self, value):
        return bool(np.all(np.isfinite(value)))

    def params(self, value):
        # the array itself is no use in a message
        return {self.field: 'shape {}'.format(np.shape(value))}


class DivisorValidator(BaseValidator):
    '''
    Check that a factor divides a layer dimension.
    dim
        the dimension to be divided
    '''
    message = 'Factor does not divide the layer dimension.'
    code = 'not_a_divisor'
    error_class = InvalidFactorization

    def __init__(self, dim, **kwargs):
        super().__init__(**kwargs)
        self.dim = dim

    def is_valid(self, value):
        return value >= 1 and self.dim % value == 0

    def params(self, value):
        return {self.field: value, 'dim': self.dim}


class MaxRankValidator(BaseValidator):
    '''
    Check that a rank is positive and no larger than 'limit'.
    '''
    message = 'Rank must lie in [1, min(d, h)].'
    code = 'rank_out_of_range'
    error_class = InvalidRank

    def __init__(self, limit, **kwargs):
        super().__init__(**kwargs)
        self.limit = limit

    def is_valid(self, value):
        return (
            isinstance(value, numbers.Integral)
            and 1 <= value <= self.limit
        )

    def params(self, value):
        return {self.field: value, 'limit': self.limit}


def validate_positive_int(value, field='value'):
    PositiveIntegerValidator(field=field)(value)
    return int(value)


def validate_finite(value, field='value'):
    FiniteValidator(field=field)(value)
    return value


def validate_seed(value, field='seed'):
    SeedValidator(field=field)(value)
    return int(value)
