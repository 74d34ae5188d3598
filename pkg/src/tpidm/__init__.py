"""Physics-informed diffusion models for time-series anomaly detection."""
