"""NumPy: array processing for numbers."""

from numpy.core import zeros, mean, log
from numpy import random
