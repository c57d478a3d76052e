"""
srwseg - Style normalization, restitution and selective whitening for
domain-generalized binary lesion segmentation, with a synthetic two-modality
benchmark, training loop, evaluation harness and numerical self-tests.
"""

from .basemodels import *
from .enums import *
from .exceptions import *
from .utils import *
from .snr import *
from .isw import *
from .network import *
from .synthdata import *
from .checkpoint import *
from .evaluation import *
from .training import *
from .checks import *
from ._version import __version__
