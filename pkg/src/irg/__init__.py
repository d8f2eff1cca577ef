"""Interleaved text and image generation on a synthetic scene micro-domain.

The package trains one small transformer to think in text, draw an image,
reflect on it, and draw again, then checks the whole loop against
programmatic oracles.
"""

__version__ = "0.1.0"
