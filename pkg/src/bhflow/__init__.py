"""Forecast, feature and inference pipeline for accretion-flow movies."""
