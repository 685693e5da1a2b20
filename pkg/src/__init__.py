"""psc - Principal stratification for continuous treatments"""

__version__ = "1.0.0"
