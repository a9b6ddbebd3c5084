"""Zero-sum optimal-stopping intrusion response game: simulation, learning and oracles."""
__version__ = "0.1.0"
