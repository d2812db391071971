"""marlcomm: decentralised multi-agent RL with contrastively aligned communication."""

__version__ = "0.1.0"
