"""Layer-wise probing and token attribution for BERT-style encoders."""

__version__ = "0.1.0"
