from ._eunet import *  # noqa: F401,F403
