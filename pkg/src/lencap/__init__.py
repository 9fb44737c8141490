"""Length-controllable caption generation with length-level embeddings.

Submodules: ``tensor`` (autodiff kernel), ``levels``, ``data`` (synthetic
corpus), ``model``, ``training``, ``decoding``, ``metrics``,
``evaluation``, ``bench`` and ``cli``.
"""

__version__ = "0.1.0"
