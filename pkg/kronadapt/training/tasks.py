'''
Synthetic data for the training loop.
'''
import numpy as np

from kronadapt.adapters import get_adapter
from kronadapt.validators import validate_seed

from .objective import DenoiseBatch, denoise_predict

__all__ = ['TeacherStudentTask', 'NUM_TIMESTEPS']

NUM_TIMESTEPS = 1000


class TeacherStudentTask:
    '''
    Targets come from a hidden model that shares the student's base
    weights and down factors, with its up factors redrawn from
    N(0, target_std). The student can therefore reach zero loss, and
    whether it does checks the gradient path end to end.

    student
        a ToyAttentionModel with adapters on the groups to train
    '''
    def __init__(self, student, target_std=0.1, seed=0):
        rng = np.random.default_rng(validate_seed(seed))
        hidden = {}
        for group, state in student.adapters.items():
            up = get_adapter(state.family).state_up_factor(state)
            shape = getattr(state, up).shape
            hidden[group] = state.replace_factors(**{up: rng.normal(0.0, target_std, size=shape)})
        self.hidden = student.with_adapters(hidden)
        self.seed = seed

    @property
    def dim(self):
        return self.hidden.dim

    def sample(self, rng, batch_size):
        z_t = rng.standard_normal((batch_size, self.dim))
        c = rng.standard_normal((batch_size, self.dim))
        t = rng.integers(0, NUM_TIMESTEPS, size=batch_size)
        batch = DenoiseBatch(z_t=z_t, eps=np.zeros_like(z_t), c=c, t=t)
        return batch.with_targets(denoise_predict(self.hidden, batch))

    def batches(self, batch_size, seed=None):
        '''
        Endless, reproducible stream of batches.
        '''
        rng = np.random.default_rng((self.seed + 1) % 2 ** 64 if seed is None else validate_seed(seed))
        return self._stream(rng, batch_size)

    def _stream(self, rng, batch_size):
        while True:
            yield self.sample(rng, batch_size)
