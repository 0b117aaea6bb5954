"""Closed-loop grasping of a small sphere from an eye-in-hand camera.

Subpackages are plain modules: ``tensor`` (numpy layers), ``kinematics``,
``simenv``, ``expert``, ``render``, ``controller``, ``vision``, ``dagger``,
``evaluation``, ``datagen`` and the ``cli`` entry point.
"""

__version__ = "0.1.0"
