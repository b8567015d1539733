"""Two-stage cloth unfolding at desk scale: self-supervised per-pixel
value pretraining followed by PPO fine-tuning over an observation-aligned
discrete pick-and-place action space, on a deterministic quasi-static
mass-spring cloth simulator."""

__version__ = "0.1.0"
