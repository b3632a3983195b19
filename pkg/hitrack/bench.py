"""Datasets, metrics, synthetic sequences and the command line"""

from _hitrack.bench import *  # noqa F403
from _hitrack.cli import *  # noqa F403
from _hitrack.synth import *  # noqa F403
