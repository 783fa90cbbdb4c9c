"""glyphflow: knowledge-aware concept customization on a synthetic glyph world."""

__version__ = "0.1.0"
