"""Radiomics-guided contrastive pretraining for chest X-ray pneumonia detection."""

__version__ = "0.1.0"
