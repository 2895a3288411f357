"""Joint bit and power loading for OFDM under average-BER and total-power constraints."""

from .channel import ChannelParams, ChannelRealization, realize
from .kkt import ConstraintCase, KktState
from .linkmodel import Allocation, LinkParams
from .lmsolver import LmConfig, LmResult, Termination
from .loader import LoaderOptions, LoadingResult, optimize, verify_kkt

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "ChannelParams",
    "ChannelRealization",
    "ConstraintCase",
    "KktState",
    "LinkParams",
    "LmConfig",
    "LmResult",
    "LoaderOptions",
    "LoadingResult",
    "Termination",
    "optimize",
    "realize",
    "verify_kkt",
]
