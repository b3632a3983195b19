"""Exception hierarchy"""

from _hitrack.errors import *  # noqa F403
