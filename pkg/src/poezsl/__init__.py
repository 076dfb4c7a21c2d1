"""Product-of-experts multimodal VAE with auxiliary unlabeled data for generalized zero/few-shot learning."""

__version__ = "0.1.0"
