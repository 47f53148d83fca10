"""Synthetic data, training, tracking and evaluation around the fusion stack."""
