"""User-space model of continuous kernel-module re-randomization."""

from .asm import assemble
from .loader import LoadConfig, LoadedModule, load
from .modfmt import ModuleImage, parse, serialize
from .randomizer import MetricsSnapshot, Runtime
from .vmem import PAGE_SIZE, AccessFault, AddressSpace

__all__ = [
    "PAGE_SIZE", "AccessFault", "AddressSpace", "LoadConfig", "LoadedModule", "MetricsSnapshot",
    "ModuleImage", "Runtime", "assemble", "load", "parse", "serialize",
]
__version__ = "0.1.0"
