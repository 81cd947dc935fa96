"""Few-shot segmentation with episodic training and a denoising surrogate task."""
__version__ = "0.1.0"
