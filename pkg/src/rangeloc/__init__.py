"""Range-only localization workbench: simulator, dataset builder, sequence
models on a from-scratch autodiff engine, a classical sliding-window solver,
and evaluation reports."""

__version__ = "0.1.0"
