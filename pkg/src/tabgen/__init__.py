"""Any-order autoregressive tabular synthesizer with diffusion-based
continuous columns and a masked transformer backbone."""

__version__ = "0.1.0"
