"""Learning exactly-linearizable dynamical models and controlling them.

Submodules are imported directly: elcontrol.model for identification,
elcontrol.control for design, elcontrol.simulate for closed-loop runs,
elcontrol.liecheck for linearizability checks, elcontrol.cli for the
batch commands.
"""

__version__ = "0.1.0"
