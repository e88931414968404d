"""Novel-view spatial reasoning: camera-motion planning, synthesis, verification and evaluation."""

__version__ = "0.1.0"
