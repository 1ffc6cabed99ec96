"""Markov-model sonification of molecular free-energy landscapes.

Pipeline: discretize feature trajectories into observed states, estimate
observed and hidden Markov models, derive static and dynamic sonification
parameters, then render audio offline or stream parameters over OSC/UDP.
"""

from mdsonify.trajio import FeatureSeries, ObservedChain
from mdsonify.msm import TransitionModel
from mdsonify.hmm import HiddenModel

__all__ = ["FeatureSeries", "ObservedChain", "TransitionModel", "HiddenModel"]
__version__ = "0.1.0"
