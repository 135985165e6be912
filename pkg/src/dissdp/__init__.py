"""Grid dynamic programming for economic MPC: value functions, dissipativity
certificates and terminal-cost studies."""

__version__ = "0.1.0"
