"""syntag: sequence labeling over dependency trees.

A self-contained toolkit that trains a graph-convolution + graph-gated LSTM
+ CRF tagger (and two plain-BiLSTM baselines) with its own reverse-mode
autodiff core. See the README for the command line interface.
"""

__version__ = "0.1.0"
