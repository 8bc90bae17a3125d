"""Hybrid-plasticity spiking networks with meta-learned local rules."""

from .core import (Layer, LayerParams, LayerState, MetaParams, Network,
                   OutputRecord, Rho, Rule, SimConstants, Tape, forward,
                   step_layer)
from .errors import (CheckpointError, ConfigError, DataError,
                     DegenerateInputError, DimensionError, HpsnnError,
                     NumericError)
from .grad import GradBundle, OptimizerState, adam_step, bptt, fd_gradient, mse_loss, surrogate_deriv
from .plasticity import (LabelHebbState, StdpParams, hebbian_update,
                         label_hebbian_accumulate, mixed_output, stdp_traces,
                         stdp_update)

__version__ = "0.1.0"
