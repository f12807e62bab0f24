"""Simulated Peltier-cooled vaccine chamber stack.

A desk-scale cold-chain rig without the hardware: a lumped-capacitance
thermal model of the insulated chamber, the PID control firmware that
time-proportions the Peltier element, a store-and-forward telemetry
protocol, a central control-plane service, and a scenario harness that
replays day/night temperature-cycling experiments.
"""

__version__ = "0.1.0"
