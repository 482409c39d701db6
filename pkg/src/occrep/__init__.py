"""Ego-conditioned traffic scene representations learned through occupancy decoding.

Modules, bottom up: ``autodiff`` (reverse-mode tensors), ``nn``, ``lanes``
(lanelet networks, reference paths, routes), ``sim`` (procedural networks,
IDM traffic), ``graph`` (heterogeneous graphs, occupancy labels), ``encoder``,
``decoder`` (virtual vehicles, naive baseline), ``loss``, ``training``,
``env`` (replay RL environment), ``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
