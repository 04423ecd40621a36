"""HTTP routers for the trained models."""
