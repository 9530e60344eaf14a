"""Grammar-constrained generative modeling of scene structures, trained by
matching rendered feature distributions against a target image set."""

__version__ = "0.1.0"
