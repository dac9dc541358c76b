"""Inter-layer Collision networks."""
