# Import adapter families defined in submodules into the adapters namespace.
# Importing a family module registers it.
from .base import *  # NOQA
from .factorization import *  # NOQA
from .krona import *  # NOQA
from .lora import *  # NOQA
from .lokr import *  # NOQA
from .loha import *  # NOQA
