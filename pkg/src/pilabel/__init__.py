"""Pseudo-labelling for physics-informed networks and kernel collocation solvers.

Modules: ``diffengine`` (jets and reverse-mode gradients), ``pde`` (problem
definitions and point sets), ``pinn``, ``pigp``, ``semisup`` (self- and
co-training loops), ``oracle`` (reference solutions) and ``cli``.
"""
__version__ = "0.1.0"
