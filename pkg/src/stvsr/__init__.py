"""Space-time video super-resolution at desk scale.

Flow-guided keyframe aggregation, a video-level guidance prompt and a
one-step latent flow-matching refiner, trained on synthetic moving shapes.
"""
__version__ = "0.1.0"
