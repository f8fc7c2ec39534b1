from .attention import *  # NOQA
from .objective import *  # NOQA
from .gradients import *  # NOQA
from .optim import *  # NOQA
from .loop import *  # NOQA
from .tasks import *  # NOQA
