"""Basin sweeps, reconstruction experiments and image metrics."""
