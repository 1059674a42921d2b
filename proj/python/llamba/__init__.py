"""Llamba: discrete Mamba-2 runtime with MOHAWK distillation."""

try:
    from llamba._llamba import *  # noqa: F401,F403  (installed layout)
    from llamba._llamba import __doc__  # noqa: F401
except ImportError:  # build-tree layout: extension sits on PYTHONPATH directly
    from _llamba import *  # noqa: F401,F403
    from _llamba import __doc__  # noqa: F401
