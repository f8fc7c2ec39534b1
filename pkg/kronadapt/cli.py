'''
Command line entry point.

    kronadapt [-v] [--seed N] <command> ...

Data (CSV, scores) goes to stdout, diagnostics to stderr. Exit codes:
0 success, 2 usage or input error, 3 numerical failure.
'''
import argparse
import csv
import dataclasses
import json
import logging
import statistics
import sys
import time

import numpy as np

from kronadapt import artifact_io
from kronadapt.adapters import (
    AdapterSpec,
    Family,
    divisors,
    lokr_factorization,
    manifest_param_count,
    param_count,
)
from kronadapt.exceptions import (
    GradientCheckFailed,
    InvalidSpec,
    KronAdaptError,
    NumericalError,
    SizeOverflow,
)
from kronadapt.kron_core import kron_materialize, kron_matvec, kron_matvec_cost
from kronadapt.metrics import (
    Role,
    dino_score,
    image_alignment_score,
    text_alignment_score,
)
from kronadapt.training import (
    GROUPS,
    TeacherStudentTask,
    ToyAttentionModel,
    check_adapter_gradients,
    default_grad_check_spec,
    train,
)
from kronadapt.validators import validate_seed

__all__ = ['main', 'build_parser']

logger = logging.getLogger('kronadapt')

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

GRAD_TOLERANCE = 1e-5
BENCH_TOLERANCE = 1e-10


def _seed(args, default=0):
    seed = getattr(args, 'seed', None)
    return default if seed is None else seed


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError('{!r} is not an integer'.format(text))
    if value < 1:
        raise argparse.ArgumentTypeError('must be at least 1, got {}'.format(value))
    return value


def _seed_arg(text):
    try:
        return validate_seed(int(text))
    except (ValueError, InvalidSpec) as e:
        raise argparse.ArgumentTypeError('{!r} is not a seed: {}'.format(text, e))


def _writer(out):
    return csv.writer(out, lineterminator='\n')


# =========================================
# plan
# =========================================

# columns that identify a template, per family
_PLAN_KEYS = {
    Family.KRONA: ('a1', 'a2'),
    Family.LORA: ('rank',),
    Family.LOHA: ('rank',),
    Family.LOKR: ('factor', 'rank'),
}


def _plan_templates(args, manifest):
    '''
    Templates to tabulate. One from the flags, or with --sweep every
    candidate the manifest's dimensions admit for the family.
    '''
    family = Family(args.family)
    base = AdapterSpec(family=family, seed=_seed(args), factor=-1 if args.factor is None else args.factor)
    if not args.sweep:
        return [dataclasses.replace(base, a1=args.a1, a2=args.a2, rank=args.rank)]
    if family is Family.KRONA:
        a1s = sorted({a for layer in manifest.layers for a in divisors(layer.d)})
        a2s = sorted({a for layer in manifest.layers for a in divisors(layer.h)})
        return [dataclasses.replace(base, a1=a1, a2=a2) for a1 in a1s for a2 in a2s]
    if family is Family.LOKR:
        factors = sorted({f for layer in manifest.layers for f in divisors(layer.d) + divisors(layer.h)})
        return [dataclasses.replace(base, factor=f, rank=args.rank) for f in [-1] + factors]
    largest = max(min(layer.d, layer.h) for layer in manifest.layers)
    return [dataclasses.replace(base, rank=r) for r in range(1, largest + 1)]


def _plan_row(template, manifest):
    counts = []
    total = 0
    valid = True
    for layer in manifest.layers:
        try:
            count = param_count(template.for_layer(layer.d, layer.h))
        except InvalidSpec:
            valid = False
            counts.append('invalid')
        else:
            total += count
            counts.append(count)
    return valid, total, counts


def _template_ids(template, keys, missing):
    return tuple(missing if getattr(template, k) is None else getattr(template, k) for k in keys)


def cmd_plan(args, out):
    manifest = artifact_io.load_manifest(args.manifest)
    if not manifest.layers:
        raise InvalidSpec('Manifest has no layers.', params={'manifest': manifest.name})
    family = Family(args.family)
    keys = _PLAN_KEYS[family]
    templates = _plan_templates(args, manifest)

    rows = []
    if not args.sweep:
        # names the failing layer
        total = manifest_param_count(manifest, templates[0])
        _, _, counts = _plan_row(templates[0], manifest)
        rows.append((total, templates[0], counts))
    else:
        invalid = []
        for template in templates:
            valid, total, counts = _plan_row(template, manifest)
            if valid:
                rows.append((total, template, counts))
            else:
                invalid.append(('invalid', template, counts))
        rows.sort(key=lambda row: (row[0],) + _template_ids(row[1], keys, missing=-1))
        rows.extend(invalid)

    writer = _writer(out)
    writer.writerow(list(keys) + ['total_params'] + [layer.layer_name for layer in manifest.layers])
    for total, template, counts in rows:
        ids = list(_template_ids(template, keys, missing=''))
        writer.writerow(ids + [total] + counts)
    return EXIT_OK


# =========================================
# factorize
# =========================================

def cmd_factorize(args, out):
    m, n = lokr_factorization(args.dim, args.factor)
    out.write('({}, {})\n'.format(m, n))
    return EXIT_OK


# =========================================
# train
# =========================================

def cmd_train(args, out):
    config = artifact_io.load_train_config(args.config)
    if getattr(args, 'seed', None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    model = ToyAttentionModel.random(config.dim, template=config.adapter_spec(), seed=config.seed)
    task = TeacherStudentTask(model, target_std=config.target_std, seed=config.seed)
    try:
        history = train(model, task.batches(config.batch_size), config)
    except NumericalError as e:
        history = getattr(e, 'history', None)
        if history is not None and args.out:
            artifact_io.save_history_csv(history, args.out)
        raise

    if args.out:
        artifact_io.save_history_csv(history, args.out)
    if args.ckpt:
        artifact_io.save_checkpoint(
            {group: model.adapters[group] for group in GROUPS if group in model.adapters},
            args.ckpt
        )
    fields = ['steps={}'.format(len(history))]
    if history.losses:
        fields.append('initial_loss={:.6e}'.format(history.losses[0]))
        fields.append('final_loss={:.6e}'.format(history.losses[-1]))
    for group, delta in history.module_deltas.items():
        fields.append('delta_{}={:.6e}'.format(group, delta))
    out.write(' '.join(fields) + '\n')
    return EXIT_OK


# =========================================
# grad-check
# =========================================

def cmd_grad_check(args, out):
    families = [f.value for f in Family] if args.family == 'all' else [args.family]
    failed = []
    for family in families:
        spec = default_grad_check_spec(
            family,
            d=args.d,
            h=args.h,
            a1=args.a1,
            a2=args.a2,
            rank=args.rank,
            factor=args.factor,
            decompose_both=args.decompose_both or None,
        )
        report = check_adapter_gradients(
            spec,
            trials=args.trials,
            step=args.step,
            seed=_seed(args),
            corrupt=args.corrupt
        )
        passed = report.passed(GRAD_TOLERANCE)
        out.write('family={} trials={} max_rel_error={:.3e} {}\n'.format(
            family, report.trials, report.max_error, 'ok' if passed else 'FAILED'
        ))
        if not passed:
            sys.stderr.write(json.dumps(report.worst, indent=2) + '\n')
            failed.append(family)
    if failed:
        raise GradientCheckFailed(
            'Analytic gradients disagree with finite differences.',
            params={'families': failed, 'tolerance': GRAD_TOLERANCE}
        )
    return EXIT_OK


# =========================================
# eval-metrics
# =========================================

def cmd_eval_metrics(args, out):
    if (args.dino_real is None) != (args.dino_gen is None):
        raise InvalidSpec('--dino-real and --dino-gen go together.')
    real = artifact_io.load_embeddings(args.real, Role.REFERENCE_IMAGES)
    gen = artifact_io.load_embeddings(args.gen, Role.GENERATED_IMAGES)
    scores = [('clip_i', image_alignment_score(real, gen))]
    if args.dino_real is not None:
        dino_real = artifact_io.load_embeddings(args.dino_real, Role.REFERENCE_IMAGES)
        dino_gen = artifact_io.load_embeddings(args.dino_gen, Role.GENERATED_IMAGES)
        scores.append(('dino', dino_score(dino_real, dino_gen)))
    if args.prompts is not None:
        prompts = artifact_io.load_embeddings(args.prompts, Role.PROMPTS)
        scores.append(('clip_t', text_alignment_score(gen, prompts)))
    out.write(' '.join('{}={:.4f}'.format(name, value) for name, value in scores) + '\n')
    return EXIT_OK


# =========================================
# bench
# =========================================

def _median_ns(fn, reps):
    times = []
    for _ in range(reps):
        start = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - start)
    return int(statistics.median(times))


def run_bench(a1, a2, b1, b2, reps, seed=0, budget=None):
    '''
    Time (A ⊗ B) x structured and against a prebuilt dense product.
    Returns one dict per method. The dense side is skipped when the
    product exceeds the element budget; its row then has
    median_ns None. Raises NumericalError if the two disagree.
    '''
    rng = np.random.default_rng(validate_seed(seed))
    a = rng.standard_normal((a1, a2))
    b = rng.standard_normal((b1, b2))
    x = rng.standard_normal(a2 * b2)
    structured_cost, dense_cost = kron_matvec_cost(a1, a2, b1, b2)
    shape = '{}x{}x{}x{}'.format(a1, a2, b1, b2)

    try:
        dense = kron_materialize(a, b, budget=budget)
    except SizeOverflow as e:
        logger.warning('Materialized side skipped: %s', e)
        dense = None
    if dense is not None:
        expected = dense @ x
        got = kron_matvec(a, b, x)
        scale = max(float(np.max(np.abs(expected))), 1.0)
        if float(np.max(np.abs(got - expected))) > BENCH_TOLERANCE * scale:
            raise NumericalError(
                'Structured product disagrees with the dense oracle.',
                params={'shape': shape}
            )

    rows = [{
        'method': 'structured',
        'shape': shape,
        'median_ns': _median_ns(lambda: kron_matvec(a, b, x), reps),
        # B X and the result
        'allocations_estimate': b1 * a2 + a1 * b1,
        'multiply_adds': structured_cost,
    }]
    rows.append({
        'method': 'materialized',
        'shape': shape,
        'median_ns': None if dense is None else _median_ns(lambda: dense @ x, reps),
        # the dense product and the result
        'allocations_estimate': a1 * b1 * a2 * b2 + a1 * b1,
        'multiply_adds': dense_cost,
    })
    return rows


BENCH_COLUMNS = ('method', 'shape', 'median_ns', 'allocations_estimate', 'multiply_adds')


def cmd_bench(args, out):
    rows = run_bench(
        args.a1, args.a2, args.b1, args.b2,
        reps=args.reps,
        seed=_seed(args),
        budget=args.element_budget
    )
    writer = _writer(out)
    writer.writerow(BENCH_COLUMNS)
    for row in rows:
        writer.writerow([
            'refused' if row[c] is None else row[c]
            for c in BENCH_COLUMNS
        ])
    return EXIT_OK


# =========================================
# Parser and entry point
# =========================================

def _common_options():
    # SUPPRESS lets the flags sit either side of the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '-v', '--verbose', action='count', default=argparse.SUPPRESS,
        help='more log output on stderr, -vv for debug'
    )
    common.add_argument(
        '--seed', type=_seed_arg, default=argparse.SUPPRESS,
        help='seed for every random draw of the command'
    )
    return common


def build_parser():
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog='kronadapt',
        description='Kronecker and low-rank adapters: planning, training and audits.',
        parents=[common],
    )
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True
    families = [f.value for f in Family]

    p = sub.add_parser('plan', parents=[common], help='trainable parameter counts over a layer manifest')
    p.add_argument('--manifest', required=True)
    p.add_argument('--family', choices=families, default=Family.KRONA.value)
    p.add_argument('--a1', type=int)
    p.add_argument('--a2', type=int)
    p.add_argument('--rank', type=int)
    p.add_argument('--factor', type=int)
    p.add_argument('--sweep', action='store_true', help='tabulate every candidate, cheapest first')
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser('factorize', parents=[common], help='LoKr split of one dimension')
    p.add_argument('--dim', type=_positive_int, required=True)
    p.add_argument('--factor', type=int, default=-1)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser('train', parents=[common], help='teacher-student training run')
    p.add_argument('--config', required=True)
    p.add_argument('--out', help='loss history CSV')
    p.add_argument('--ckpt', help='adapter checkpoint JSON')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('grad-check', parents=[common], help='analytic gradients against finite differences')
    p.add_argument('--family', choices=families + ['all'], default=Family.KRONA.value)
    p.add_argument('--trials', type=_positive_int, default=20)
    p.add_argument('--step', type=float, default=1e-6)
    p.add_argument('--d', type=int)
    p.add_argument('--h', type=int)
    p.add_argument('--a1', type=int)
    p.add_argument('--a2', type=int)
    p.add_argument('--rank', type=int)
    p.add_argument('--factor', type=int)
    p.add_argument('--decompose-both', action='store_true', help='lokr: low-rank first block too')
    p.add_argument('--corrupt', action='store_true', help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser('eval-metrics', parents=[common], help='alignment scores over embedding files')
    p.add_argument('--real', required=True, help='reference image embeddings')
    p.add_argument('--gen', required=True, help='generated image embeddings')
    p.add_argument('--dino-real')
    p.add_argument('--dino-gen')
    p.add_argument('--prompts', help='prompt embeddings, paired with --gen')
    p.set_defaults(func=cmd_eval_metrics)

    p = sub.add_parser('bench', parents=[common], help='structured against dense Kronecker matvec')
    p.add_argument('--a1', type=_positive_int, required=True)
    p.add_argument('--a2', type=_positive_int, required=True)
    p.add_argument('--b1', type=_positive_int, required=True)
    p.add_argument('--b2', type=_positive_int, required=True)
    p.add_argument('--reps', type=_positive_int, default=21)
    p.add_argument('--element-budget', type=_positive_int, help='overrides KRONADAPT_ELEMENT_BUDGET')
    p.set_defaults(func=cmd_bench)
    return parser


def _configure_logging(verbosity):
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format='%(levelname)s %(name)s: %(message)s'
    )


def main(argv=None, out=None):
    '''
    Run one command, return its exit code.
    argparse exits with 2 on its own for usage errors.
    '''
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    _configure_logging(getattr(args, 'verbose', 0))
    try:
        return args.func(args, out)
    except NumericalError as e:
        logger.error('%s', e)
        return EXIT_NUMERICAL
    except KronAdaptError as e:
        logger.error('%s', e)
        return EXIT_INPUT
    except OSError as e:
        logger.error('%s', e)
        return EXIT_INPUT
