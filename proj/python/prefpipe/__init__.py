"""Preference-pair construction and tabular DPO training core."""

try:
    from ._prefpipe import *  # noqa: F401,F403
    from ._prefpipe import __doc__ as _doc
except ImportError:
    from _prefpipe import *  # noqa: F401,F403
    from _prefpipe import __doc__ as _doc

__doc__ = _doc
