import collections
import dataclasses
import enum
import math
import warnings
from typing import ClassVar, Optional

import numpy as np

from kronadapt.exceptions import (
    DimensionMismatch,
    InvalidSpec,
    ParseError,
    ZeroBaseNorm,
)
from kronadapt.utils import as_matrix, as_vector, decode_array, encode_array
from kronadapt.validators import (
    FiniteValidator,
    PositiveIntegerValidator,
    SeedValidator,
)

__all__ = [
    'Family',
    'DownInit',
    'UpInit',
    'InitScheme',
    'AdapterSpec',
    'AdapterState',
    'AdapterBase',
    'Adapter',
    'get_adapter',
    'registered_families',
    'build_adapter',
    'delta_weight',
    'delta_matvec',
    'adapter_forward',
    'merge_adapter',
    'unmerge_adapter',
    'param_count',
    'rank_bound',
    'module_delta',
]


class Family(str, enum.Enum):
    KRONA = 'krona'
    LORA = 'lora'
    LOKR = 'lokr'
    LOHA = 'loha'


class DownInit(str, enum.Enum):
    NORMAL_S1 = 'normal_s1'
    NORMAL_S2 = 'normal_s2'
    KAIMING_UNIFORM = 'kaiming_uniform'
    XAVIER_UNIFORM = 'xavier_uniform'


class UpInit(str, enum.Enum):
    UP_ZERO = 'up_zero'
    UP_SAME = 'up_same'


@dataclasses.dataclass(frozen=True)
class InitScheme:
    '''
    How factors are drawn at construction.

    down
        distribution for every factor but the up factor
    up
        'up_zero' zeroes the up factor, so the adapter starts as the
        identity on the host layer. 'up_same' draws it like the others.
    allow_nonstandard
        must be set to use 'normal_s2', whose std is sqrt(min(d, h))
    '''
    down: DownInit = DownInit.NORMAL_S1
    up: UpInit = UpInit.UP_ZERO
    allow_nonstandard: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, 'down', DownInit(self.down))
            object.__setattr__(self, 'up', UpInit(self.up))
        except ValueError as e:
            raise InvalidSpec(str(e), params={'init': (self.down, self.up)})

    def to_dict(self):
        return {
            'down': self.down.value,
            'up': self.up.value,
            'allow_nonstandard': self.allow_nonstandard,
        }

    @classmethod
    def from_dict(cls, value):
        return cls(**value)


@dataclasses.dataclass(frozen=True, kw_only=True)
class AdapterSpec:
    '''
    Everything needed to build one adapter.
    Fields a family does not use are ignored by it. d and h may be left
    unset on a template, which is filled per layer with for_layer().
    '''
    family: Family
    seed: int
    d: Optional[int] = None
    h: Optional[int] = None
    a1: Optional[int] = None
    a2: Optional[int] = None
    rank: Optional[int] = None
    factor: int = -1
    decompose_second: bool = True
    decompose_both: bool = False
    init: InitScheme = InitScheme()
    scale: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'family', Family(self.family))
        except ValueError:
            raise InvalidSpec('Unknown adapter family.', params={'family': self.family})
        if isinstance(self.init, dict):
            object.__setattr__(self, 'init', InitScheme.from_dict(self.init))

    def for_layer(self, d, h):
        return dataclasses.replace(self, d=d, h=h)

    def to_dict(self):
        value = dataclasses.asdict(self)
        value['family'] = self.family.value
        value['init'] = self.init.to_dict()
        return value

    @classmethod
    def from_dict(cls, value):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(value) - fields
        if unknown:
            raise InvalidSpec('Unknown adapter spec fields.', params={'fields': sorted(unknown)})
        return cls(**value)


@dataclasses.dataclass(frozen=True, eq=False, kw_only=True)
class AdapterState:
    '''
    Trained or freshly built factors of one adapter.
    Values are immutable; training produces new states with
    replace_factors().
    '''
    d: int
    h: int
    scale: float = 1.0
    seed: int = 0

    family: ClassVar[str] = ''
    factor_names: ClassVar[tuple] = ()

    def factors(self):
        return collections.OrderedDict(
            (name, getattr(self, name)) for name in self.factor_names
        )

    def replace_factors(self, **factors):
        return dataclasses.replace(self, **factors)

    def _check_shape(self, name, expected):
        shape = getattr(self, name).shape
        if shape != tuple(expected):
            raise DimensionMismatch(
                'Factor shape does not fit the layer.',
                params={'factor': name, 'shape': shape, 'expected': tuple(expected)}
            )

    def __post_init__(self):
        for name in self.factor_names:
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, as_matrix(value, field=name))


# =========================================
# Adapter family definitions
# =========================================

_registry = collections.OrderedDict()


class AdapterBase(type):
    '''
    Merge the Meta classes of a definition and its bases, and register
    every class that declares a family.
    '''
    def __new__(mcs, name, bases, attrs):
        meta_class = attrs.pop('Meta', None)

        cls = super().__new__(mcs, name, bases, attrs)

        # Get all the Meta classes from all the bases
        meta_class_bases = [meta_class] + [getattr(base, '_meta_class', None)
                                           for base in bases]
        meta_class_bases = tuple(filter(bool, meta_class_bases))
        cls._meta_class = type(str(name + 'Meta'), meta_class_bases, {})

        family = getattr(cls._meta_class, 'family', '')
        if family:
            _registry[family] = cls
        return cls


class Adapter(metaclass=AdapterBase):
    '''
    A base for adapter family definitions.
    A definition holds no factors. It validates specs, builds states,
    and computes with states of its family. Per-family defaults are
    declared on the inner Meta, and can be overridden by keyword on
    construction e.g.

        LoRA(default_rank=8)

    Subclasses declare
    - Meta.family and Meta.state_class
    - factor_shapes()
    - delta_weight()
    - gradients()
    - rank_bound()
    and usually extend clean() with a super() call.
    '''
    class Meta:
        family = ''
        state_class = None
        # name of the factor zeroed by 'up_zero'
        up_factor = 'B'
        # read-only shape properties of the state, written into
        # checkpoint headers and checked on load
        shape_fields = ()

    def __init__(self, **kwargs):
        self.meta = self._meta_class()
        for attr, value in kwargs.items():
            setattr(self.meta, attr, value)

    @property
    def family(self):
        return self.meta.family

    def clean(self, spec):
        '''
        Validate 'spec' and return it, possibly with family defaults
        filled in. Raises an InvalidSpec subclass naming the field.
        '''
        if spec.family != self.meta.family:
            raise InvalidSpec(
                'Spec family does not match the adapter.',
                params={'family': spec.family.value, 'adapter': self.meta.family}
            )
        PositiveIntegerValidator(field='d')(spec.d)
        PositiveIntegerValidator(field='h')(spec.h)
        SeedValidator(field='seed')(spec.seed)
        FiniteValidator(field='scale')(spec.scale)
        if spec.init.down is DownInit.NORMAL_S2 and not spec.init.allow_nonstandard:
            raise InvalidSpec(
                "'normal_s2' needs allow_nonstandard=True.",
                params={'init': spec.init.down.value}
            )
        return spec

    def factor_shapes(self, spec):
        '''
        Return an OrderedDict of factor name -> (rows, cols) for a
        cleaned spec. The order is the order factors are drawn in.
        '''
        raise NotImplementedError('%s.factor_shapes' % self.__class__)

    def up_factor(self, spec):
        return self.meta.up_factor

    def state_up_factor(self, state):
        '''
        Name of the up factor of a built state.
        '''
        return self.meta.up_factor

    def param_count(self, spec):
        spec = self.clean(spec)
        return sum(r * c for r, c in self.factor_shapes(spec).values())

    def rank_bound(self, spec):
        raise NotImplementedError('%s.rank_bound' % self.__class__)

    def init_factor(self, rng, spec, rows, cols):
        scheme = spec.init.down
        if scheme is DownInit.NORMAL_S1:
            return rng.normal(0.0, 1.0 / cols, size=(rows, cols))
        if scheme is DownInit.NORMAL_S2:
            warnings.warn(
                "'normal_s2' draws with std sqrt(min(d, h)), far larger than usual.",
                UserWarning,
                stacklevel=3
            )
            return rng.normal(0.0, math.sqrt(min(spec.d, spec.h)), size=(rows, cols))
        if scheme is DownInit.KAIMING_UNIFORM:
            # a = sqrt(5), as torch.nn.Linear does
            bound = 1.0 / math.sqrt(cols)
        else:
            bound = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))

    def build(self, spec):
        '''
        Return a new state for 'spec'. Deterministic given spec.seed.
        '''
        spec = self.clean(spec)
        rng = np.random.default_rng(spec.seed)
        up = self.up_factor(spec)
        shapes = self.factor_shapes(spec)
        factors = {}
        for name, (rows, cols) in shapes.items():
            if name == up and spec.init.up is UpInit.UP_ZERO:
                factors[name] = np.zeros((rows, cols))
            else:
                factors[name] = self.init_factor(rng, spec, rows, cols)
        for name in self.meta.state_class.factor_names:
            factors.setdefault(name, None)
        return self.meta.state_class(
            d=spec.d,
            h=spec.h,
            scale=float(spec.scale),
            seed=int(spec.seed),
            **factors
        )

    def delta_weight(self, state):
        raise NotImplementedError('%s.delta_weight' % self.__class__)

    def delta_matvec(self, state, x):
        '''
        Apply ΔW to a vector of length h, or to each row of an n x h
        matrix. The default materializes ΔW.
        '''
        delta = self.delta_weight(state)
        if x.ndim == 1:
            return delta @ x
        return x @ delta.T

    def gradients(self, state, x, upstream):
        '''
        Return an OrderedDict of factor name -> dL/dfactor, given
        upstream = dL/d(ΔW x). x and upstream may hold one sample each,
        or n samples as rows, in which case gradients are summed.
        '''
        raise NotImplementedError('%s.gradients' % self.__class__)

    def get_prep_value(self, state):
        '''
        Return a JSON-serialisable dict of 'state'.
        '''
        value = {
            'family': self.meta.family,
            'd': state.d,
            'h': state.h,
            'scale': state.scale,
            'seed': state.seed,
        }
        for name in self.meta.shape_fields:
            value[name] = getattr(state, name)
        value['factors'] = collections.OrderedDict(
            (name, encode_array(arr))
            for name, arr in state.factors().items()
            if arr is not None
        )
        return value

    def to_python(self, value):
        '''
        Build a state from the output of get_prep_value().
        '''
        try:
            factors = {
                name: decode_array(arr, field=name)
                for name, arr in value['factors'].items()
            }
            unknown = set(factors) - set(self.meta.state_class.factor_names)
            if unknown:
                raise ParseError('Unknown factors.', params={'factors': sorted(unknown)})
            for name in self.meta.state_class.factor_names:
                factors.setdefault(name, None)
            state = self.meta.state_class(
                d=int(value['d']),
                h=int(value['h']),
                scale=float(value['scale']),
                seed=int(value['seed']),
                **factors
            )
            for name in self.meta.shape_fields:
                if name in value and value[name] != getattr(state, name):
                    raise ParseError(
                        'Header disagrees with the factor shapes.',
                        params={'field': name, 'header': value[name]}
                    )
            return state
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ParseError(
                'Malformed adapter entry.',
                params={'family': self.meta.family, 'reason': str(e)}
            )
        except DimensionMismatch as e:
            raise ParseError(e.message, params=e.params)


def registered_families():
    return list(_registry)


_instances = {}


def get_adapter(family):
    '''
    Return the shared definition instance for a family name.
    '''
    try:
        family = Family(family).value
    except ValueError:
        raise InvalidSpec('Unknown adapter family.', params={'family': family})
    try:
        return _instances[family]
    except KeyError:
        pass
    try:
        cls = _registry[family]
    except KeyError:
        raise InvalidSpec('No adapter registered for family.', params={'family': family})
    _instances[family] = cls()
    return _instances[family]


# =========================================
# Operations over any family
# =========================================

def build_adapter(spec):
    return get_adapter(spec.family).build(spec)


def delta_weight(state):
    '''
    Return scale * ΔW, shape d x h.
    '''
    return get_adapter(state.family).delta_weight(state)


def delta_matvec(state, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != state.h:
        raise DimensionMismatch(
            'Input width must equal the layer in-dimension h.',
            params={'x': x.shape, 'h': state.h}
        )
    return get_adapter(state.family).delta_matvec(state, x)


def _check_weight(state, w0):
    w0 = as_matrix(w0, field='W0')
    if w0.shape != (state.d, state.h):
        raise DimensionMismatch(
            'Base weight must be d x h.',
            params={'W0': w0.shape, 'expected': (state.d, state.h)}
        )
    return w0


def adapter_forward(state, w0, b0, x):
    '''
    Return W0 x + ΔW x + b0. x is a vector of length h, or an n x h
    matrix of row vectors.
    '''
    w0 = _check_weight(state, w0)
    b0 = as_vector(b0, field='b0')
    if b0.shape[0] != state.d:
        raise DimensionMismatch('Bias must have length d.', params={'b0': b0.shape, 'd': state.d})
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        base = w0 @ x if x.shape[0] == state.h else None
    else:
        base = x @ w0.T if x.shape[-1] == state.h else None
    if base is None:
        raise DimensionMismatch(
            'Input width must equal the layer in-dimension h.',
            params={'x': x.shape, 'h': state.h}
        )
    return base + delta_matvec(state, x) + b0


def merge_adapter(state, w0):
    '''
    Return W0 + ΔW, the weight that makes the adapter free at inference.
    '''
    return _check_weight(state, w0) + delta_weight(state)


def unmerge_adapter(state, w_merged):
    return _check_weight(state, w_merged) - delta_weight(state)


def param_count(spec):
    return get_adapter(spec.family).param_count(spec)


def rank_bound(spec):
    adapter = get_adapter(spec.family)
    return adapter.rank_bound(adapter.clean(spec))


def module_delta(theta_before, theta_after):
    '''
    Relative change of a layer, ||θ' − θ||_F / ||θ||_F.
    '''
    before = np.asarray(theta_before, dtype=np.float64)
    after = np.asarray(theta_after, dtype=np.float64)
    if before.shape != after.shape:
        raise DimensionMismatch(
            'Parameters must keep their shape.',
            params={'before': before.shape, 'after': after.shape}
        )
    base = np.linalg.norm(before)
    if base == 0.0:
        raise ZeroBaseNorm('Base parameters are all zero.')
    return float(np.linalg.norm(after - before) / base)
