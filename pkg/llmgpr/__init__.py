"""Group next-POI recommendation with quantized, adapter-tuned sequence models."""

__pkgname__ = "llmgpr"
__version__ = "0.1.0"
__license__ = "MIT"
