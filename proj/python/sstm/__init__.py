from ._sstm import *  # noqa: F401,F403
