"""Co-saliency detection by consensus embedding and gradient-induced decoding."""

__version__ = "0.1.0"
