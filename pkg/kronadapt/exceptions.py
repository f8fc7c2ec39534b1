__all__ = [
    'KronAdaptError',
    'DimensionMismatch',
    'SizeOverflow',
    'InvalidSpec',
    'InvalidFactorization',
    'InvalidRank',
    'ZeroBaseNorm',
    'ZeroNorm',
    'EmptySet',
    'LengthMismatch',
    'ParseError',
    'SchemaVersionMismatch',
    'DuplicateLayer',
    'NonPositiveDim',
    'NumericalError',
    'NonFinite',
    'DivergenceDetected',
    'GradientCheckFailed',
]


class KronAdaptError(Exception):
    '''
    Base for every error raised by kronadapt.

    message
        human readable text
    code
        short stable identifier, defaults to the class 'code'
    params
        dict of values naming the offending field, layer or shape.
        Collections (manifests, checkpoints) put the name of the
        failing member here, so callers need not parse the message.
    '''
    code = 'error'

    def __init__(self, message, code=None, params=None):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code
        self.params = {} if params is None else dict(params)

    def __str__(self):
        if self.params:
            return '{} ({})'.format(
                self.message,
                ', '.join('{}={!r}'.format(k, v) for k, v in self.params.items())
            )
        return self.message


class DimensionMismatch(KronAdaptError):
    code = 'dimension_mismatch'


class SizeOverflow(KronAdaptError):
    code = 'size_overflow'


class InvalidSpec(KronAdaptError):
    code = 'invalid_spec'


class InvalidFactorization(InvalidSpec):
    code = 'invalid_factorization'


class InvalidRank(InvalidSpec):
    code = 'invalid_rank'


class ZeroBaseNorm(KronAdaptError):
    code = 'zero_base_norm'


class ZeroNorm(KronAdaptError):
    code = 'zero_norm'


class EmptySet(KronAdaptError):
    code = 'empty_set'


class LengthMismatch(KronAdaptError):
    code = 'length_mismatch'


class ParseError(KronAdaptError):
    code = 'parse_error'


class SchemaVersionMismatch(ParseError):
    code = 'schema_version_mismatch'


class DuplicateLayer(ParseError):
    code = 'duplicate_layer'


class NonPositiveDim(ParseError):
    code = 'non_positive_dim'


#NB the CLI maps this branch to exit code 3, everything else to 2
class NumericalError(KronAdaptError):
    code = 'numerical_error'


class NonFinite(NumericalError):
    code = 'non_finite'


class DivergenceDetected(NumericalError):
    code = 'divergence'


class GradientCheckFailed(NumericalError):
    code = 'gradient_check_failed'
