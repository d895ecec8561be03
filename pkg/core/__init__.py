"""Numeric core: differentiable arrays, model components, losses and decoding."""
