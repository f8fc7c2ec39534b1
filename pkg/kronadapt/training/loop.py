import dataclasses
import logging
import math
from typing import Optional

import numpy as np

from kronadapt.adapters import AdapterSpec
from kronadapt.exceptions import DivergenceDetected, InvalidSpec, NonFinite
from kronadapt.validators import validate_positive_int, validate_seed

from .objective import loss_and_gradients
from .optim import OptimizerKind, make_optimizer

__all__ = [
    'TrainConfig',
    'TrainHistory',
    'train',
]

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    '''
    One training run. Mirrors the JSON train config file.

    adapter
        template for every attention group, AdapterSpec fields less
        d, h and seed
    target_std
        std of the hidden up factors in the teacher-student task
    divergence_threshold
        a loss above this aborts the run
    '''
    learning_rate: float = 5e-4
    steps: int = 1000
    optimizer: str = 'adam'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    batch_size: int = 16
    dim: int = 8
    adapter: dict = dataclasses.field(
        default_factory=lambda: {'family': 'krona', 'a1': 2, 'a2': 2}
    )
    target_std: float = 0.1
    log_every: int = 100
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            raise InvalidSpec('learning_rate must be positive.', params={'learning_rate': self.learning_rate})
        if isinstance(self.steps, bool) or not isinstance(self.steps, int) or self.steps < 0:
            raise InvalidSpec('steps must be a non-negative integer.', params={'steps': self.steps})
        try:
            self.optimizer = OptimizerKind(self.optimizer).value
        except ValueError:
            raise InvalidSpec('Unknown optimizer.', params={'optimizer': self.optimizer})
        validate_seed(self.seed)
        validate_positive_int(self.batch_size, field='batch_size')
        validate_positive_int(self.dim, field='dim')
        validate_positive_int(self.log_every, field='log_every')
        if not self.target_std > 0:
            raise InvalidSpec('target_std must be positive.', params={'target_std': self.target_std})
        if 'seed' in self.adapter or 'd' in self.adapter or 'h' in self.adapter:
            raise InvalidSpec(
                'The adapter template takes d, h and seed from the run.',
                params={'adapter': sorted(self.adapter)}
            )

    def adapter_spec(self):
        '''
        The adapter template as an AdapterSpec, seeded from the run.
        '''
        return AdapterSpec.from_dict(dict(self.adapter, seed=self.seed))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, value):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(value) - fields
        if unknown:
            raise InvalidSpec('Unknown train config fields.', params={'fields': sorted(unknown)})
        return cls(**value)


@dataclasses.dataclass
class TrainHistory:
    '''
    losses
        loss at every step, measured before that step's update
    module_deltas
        group -> relative change of the merged weight, set at the end
    '''
    losses: list = dataclasses.field(default_factory=list)
    module_deltas: dict = dataclasses.field(default_factory=dict)

    def __len__(self):
        return len(self.losses)

    def moving_means(self, window=100):
        '''
        Moving average over 'window' consecutive steps, one value per
        full window. Empty when fewer than 'window' steps were run.
        '''
        window = validate_positive_int(window, field='window')
        losses = np.asarray(self.losses, dtype=np.float64)
        if losses.shape[0] < window:
            return np.zeros(0)
        return np.lib.stride_tricks.sliding_window_view(losses, window).mean(axis=1)

    def to_csv(self):
        lines = ['step,loss']
        lines.extend('{},{!r}'.format(i, float(loss)) for i, loss in enumerate(self.losses))
        return '\n'.join(lines) + '\n'


def _diverged(loss, threshold):
    return not math.isfinite(loss) or loss > threshold


def train(model, batches, config, history: Optional[TrainHistory] = None):
    '''
    Run config.steps optimizer steps on the adapter factors of 'model',
    one batch from 'batches' per step. model.adapters is replaced with
    the trained states; base weights are never written.

    Raises DivergenceDetected when the loss goes non-finite or past
    config.divergence_threshold. The exception carries the history up
    to that point as 'history', and the model keeps the last good
    factors.
    '''
    history = TrainHistory() if history is None else history
    optimizer = make_optimizer(config)
    batches = iter(batches)

    for step in range(config.steps):
        batch = next(batches)
        try:
            with np.errstate(over='ignore', invalid='ignore'):
                loss, grads = loss_and_gradients(model, batch)
        except NonFinite:
            loss, grads = float('nan'), None
        if _diverged(loss, config.divergence_threshold):
            logger.error('Diverged at step %d, loss %r', step, loss)
            e = DivergenceDetected(
                'Training loss diverged.',
                params={'step': step, 'loss': loss}
            )
            e.history = history
            raise e
        history.losses.append(loss)
        if step % config.log_every == 0:
            logger.info('step %d loss %.6g', step, loss)

        params = {}
        flat_grads = {}
        for group, factor_grads in grads.items():
            for name, g in factor_grads.items():
                params[(group, name)] = getattr(model.adapters[group], name)
                flat_grads[(group, name)] = g
        with np.errstate(over='ignore', invalid='ignore'):
            updated = optimizer.step(params, flat_grads)

        adapters = dict(model.adapters)
        for group in grads:
            factors = {name: updated[(g, name)] for (g, name) in updated if g == group}
            try:
                adapters[group] = adapters[group].replace_factors(**factors)
            except NonFinite:
                logger.error('Non-finite factors after step %d', step)
                e = DivergenceDetected(
                    'Adapter factors went non-finite.',
                    params={'step': step, 'group': group}
                )
                e.history = history
                raise e
        model.adapters = adapters

    history.module_deltas = model.module_deltas()
    if history.losses:
        logger.info(
            'Trained %d steps, loss %.6g -> %.6g',
            len(history.losses), history.losses[0], history.losses[-1]
        )
    return history
