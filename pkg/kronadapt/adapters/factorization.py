from kronadapt.exceptions import InvalidSpec
from kronadapt.validators import validate_positive_int

from .base import param_count

__all__ = [
    'lokr_factorization',
    'divisors',
    'krona_param_count',
    'enumerate_factor_pairs',
    'manifest_param_count',
]


def lokr_factorization(dim, factor=-1):
    '''
    Split 'dim' into (m, n), m <= n, m * n == dim when a divisor is
    taken. This is the LoKr reference routine, step for step:

    - factor > 0 dividing dim gives (factor, dim // factor), ordered.
    - otherwise walk up the divisors of dim from 1, keeping a pair while
      its sum stays within the initial 1 + dim and m stays within
      factor (factor < 0 means no limit).
    '''
    if factor > 0 and (dim % factor) == 0:
        m = factor
        n = dim // factor
        if m > n:
            n, m = m, n
        return m, n
    if factor < 0:
        factor = dim
    m, n = 1, dim
    #NB set once, not per step
    length = m + n
    while m < n:
        new_m = m + 1
        while dim % new_m != 0:
            new_m += 1
        new_n = dim // new_m
        if new_m + new_n > length or new_m > factor:
            break
        else:
            m, n = new_m, new_n
    if m > n:
        n, m = m, n
    return m, n


def divisors(n):
    n = validate_positive_int(n, field='n')
    small = [i for i in range(1, int(n ** 0.5) + 1) if n % i == 0]
    large = [n // i for i in reversed(small) if i * i != n]
    return small + large


def krona_param_count(d, h, a1, a2):
    return a1 * a2 + (d // a1) * (h // a2)


def enumerate_factor_pairs(d, h):
    '''
    Every (a1, a2) with a1 | d and a2 | h, cheapest first; ties broken
    by ascending a1, then a2.
    '''
    pairs = [(a1, a2) for a1 in divisors(d) for a2 in divisors(h)]
    return sorted(pairs, key=lambda p: (krona_param_count(d, h, *p), p[0], p[1]))


def manifest_param_count(manifest, template):
    '''
    Sum the parameter count of 'template' over every manifest layer.
    Errors from a layer are re-raised with its name in params['layer'].

    manifest
        anything with a 'layers' sequence of objects carrying
        layer_name, d and h
    template
        an AdapterSpec; d and h are replaced per layer
    '''
    total = 0
    for layer in manifest.layers:
        try:
            total += param_count(template.for_layer(layer.d, layer.h))
        except InvalidSpec as e:
            params = dict(e.params, layer=layer.layer_name)
            raise e.__class__(e.message, code=e.code, params=params) from e
    return total
