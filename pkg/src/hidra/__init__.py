"""Meta-learned initializations with a class-count-agnostic output layer."""
from .autodiff import Tape, Tensor, backward
from .episodes import ClassPool, Episode, MetaBatch, SyntheticSpec, gen_synthetic, sample_episode
from .errors import HidraError
from .network import BackboneSpec, DynamicHead, MasterNeuron, Model

__all__ = ["Tape", "Tensor", "backward", "ClassPool", "Episode", "MetaBatch", "SyntheticSpec", "gen_synthetic",
           "sample_episode", "HidraError", "BackboneSpec", "DynamicHead", "MasterNeuron", "Model"]
__version__ = "0.1.0"
