"""Knowledgeable uncalibrated visual servoing over a simulated eye-in-hand arm.

Geometric task constraints from segmentation masks, a Broyden-updated
visuo-motor controller, behavior-tree execution logged as event knowledge
graphs, and similarity-based task memory.
"""

__version__ = "0.1.0"
