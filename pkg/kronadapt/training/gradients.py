import collections
import collections.abc
import dataclasses

import numpy as np

from kronadapt.adapters import (
    AdapterSpec,
    InitScheme,
    UpInit,
    build_adapter,
    delta_matvec,
    get_adapter,
)
from kronadapt.exceptions import DimensionMismatch, InvalidSpec
from kronadapt.validators import validate_seed

__all__ = [
    'adapter_gradients',
    'finite_diff_gradient',
    'relative_error',
    'GradCheckReport',
    'default_grad_check_spec',
    'check_adapter_gradients',
]


def adapter_gradients(state, x, upstream):
    '''
    Gradients of a loss with respect to every factor of 'state', given
    upstream = dL/d(ΔW x). Rows of 2-D inputs are separate samples whose
    gradients are summed.
    '''
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if (
        x.ndim != upstream.ndim
        or x.ndim not in (1, 2)
        or x.shape[-1] != state.h
        or upstream.shape[-1] != state.d
        or x.shape[:-1] != upstream.shape[:-1]
    ):
        raise DimensionMismatch(
            'x must have width h and upstream width d, row for row.',
            params={'x': x.shape, 'upstream': upstream.shape, 'layer': (state.d, state.h)}
        )
    return get_adapter(state.family).gradients(state, x, upstream)


def finite_diff_gradient(loss_fn, params, step=1e-6):
    '''
    Central differences (L(p + e) - L(p - e)) / (2 step), coordinate by
    coordinate.

    params
        an array, or a mapping of name -> array. loss_fn receives the
        same structure, holding perturbed copies.
    '''
    if not step > 0:
        raise InvalidSpec('Step must be positive.', params={'step': step})
    if not isinstance(params, collections.abc.Mapping):
        wrapped = finite_diff_gradient(lambda p: loss_fn(p['value']), {'value': params}, step)
        return wrapped['value']

    base = collections.OrderedDict(
        (name, np.array(value, dtype=np.float64)) for name, value in params.items()
    )
    grads = collections.OrderedDict()
    for name, value in base.items():
        grad = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            old = value[index]
            value[index] = old + step
            right = loss_fn(base)
            value[index] = old - step
            left = loss_fn(base)
            value[index] = old
            grad[index] = (right - left) / (2.0 * step)
        grads[name] = grad
    return grads


def relative_error(analytic, numeric):
    '''
    Largest entrywise difference over matching entries, divided by the
    largest magnitude on either side. Zero when both sides are zero.
    '''
    diff = 0.0
    scale = 0.0
    for name, num in numeric.items():
        ana = np.asarray(analytic[name])
        diff = max(diff, float(np.max(np.abs(ana - num), initial=0.0)))
        scale = max(
            scale,
            float(np.max(np.abs(ana), initial=0.0)),
            float(np.max(np.abs(num), initial=0.0)),
        )
    if scale == 0.0:
        return 0.0
    return diff / scale


@dataclasses.dataclass
class GradCheckReport:
    family: str
    trials: int
    max_error: float
    worst: dict = None

    def passed(self, tolerance=1e-5):
        return self.max_error <= tolerance


# small shapes with every factor distinct in size
_GRAD_CHECK_SHAPES = {
    'krona': {'d': 6, 'h': 6, 'a1': 2, 'a2': 3},
    'lora': {'d': 6, 'h': 5, 'rank': 2},
    'lokr': {'d': 8, 'h': 12, 'factor': 2, 'rank': 2},
    'loha': {'d': 6, 'h': 5, 'rank': 2},
}


def default_grad_check_spec(family, seed=0, **overrides):
    shape = dict(_GRAD_CHECK_SHAPES[get_adapter(family).family])
    shape.update({k: v for k, v in overrides.items() if v is not None})
    return AdapterSpec(
        family=family,
        seed=seed,
        init=InitScheme(up=UpInit.UP_SAME),
        **shape
    )


def check_adapter_gradients(spec, trials=20, step=1e-6, seed=0, corrupt=False):
    '''
    Compare adapter_gradients() with central differences on 'trials'
    random instances of 'spec' (reseeded per trial), with loss
    L = upstreamᵀ (ΔW x). Returns a GradCheckReport; 'worst' holds the
    instance with the largest error.

    corrupt
        perturb the analytic gradient, a negative control for callers
    '''
    rng = np.random.default_rng(validate_seed(seed))
    report = GradCheckReport(family=spec.family.value, trials=trials, max_error=0.0)
    for trial in range(trials):
        trial_spec = dataclasses.replace(
            spec,
            seed=int(rng.integers(0, 2 ** 31)),
            scale=float(rng.uniform(0.5, 2.0))
        )
        state = build_adapter(trial_spec)
        x = rng.standard_normal(state.h)
        upstream = rng.standard_normal(state.d)
        analytic = adapter_gradients(state, x, upstream)
        if corrupt:
            first = next(iter(analytic))
            analytic[first] = analytic[first] + 1e-2

        def loss_fn(factors):
            return float(upstream @ delta_matvec(state.replace_factors(**factors), x))

        factors = {name: arr for name, arr in state.factors().items() if arr is not None}
        numeric = finite_diff_gradient(loss_fn, factors, step)
        error = relative_error(analytic, numeric)
        if error >= report.max_error:
            report.max_error = error
            report.worst = {
                'trial': trial,
                'spec': trial_spec.to_dict(),
                'x': x.tolist(),
                'upstream': upstream.tolist(),
                'error': error,
            }
    return report
