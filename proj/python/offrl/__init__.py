"""Python bindings for the offline RL testbed."""

from ._offrl import *  # noqa: F401,F403
from ._offrl import __doc__  # noqa: F401

__version__ = "0.1.0"
