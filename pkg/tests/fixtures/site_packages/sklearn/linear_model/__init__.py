"""Linear models."""

from ._base import *
