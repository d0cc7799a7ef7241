"""Data analysis toolkit."""

from pandas.io.parsers import read_csv
from pandas.core.reshape import concat, merge
from pandas.core.frame import DataFrame
