"""Two-stage joint radar detection and channel estimation with Turbo-SBI and CRB pilot design."""

__version__ = "0.1.0"
