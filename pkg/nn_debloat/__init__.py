from importlib.metadata import version

VERSION = version("nn_debloat")
DESCRIPTION = "Prune trained neural networks without data or retraining."
