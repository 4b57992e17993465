"""Reverse-mode tape, dense networks and the bi-level training loop."""
